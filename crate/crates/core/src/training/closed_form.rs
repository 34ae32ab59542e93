use crate::error::{Error, Result};
use crate::model::{B_FLOOR, PI_MIN};

/// Sufficient statistics for the gradient-free π and b updates, summed over
/// data points and joint latent samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulators {
    /// `Σ_{n,m} E_q[s_k]` per source.
    pub presence: Vec<f64>,
    /// `Σ_{n,m} E_q[‖x - μ_mix‖_1]`.
    pub l1: f64,
    /// Number of `(n, m)` pairs.
    pub samples: usize,
    pub dim: usize,
}

impl Accumulators {
    pub fn new(k: usize, dim: usize) -> Self {
        Accumulators {
            presence: vec![0.0; k],
            l1: 0.0,
            samples: 0,
            dim,
        }
    }

    /// Adds the statistics of one data point: `presence` and `l1` are already
    /// summed over its `m` joint samples.
    pub fn add(&mut self, presence: &[f64], l1: f64, m: usize) -> Result<()> {
        if presence.len() != self.presence.len() {
            return Err(Error::Dimension(format!(
                "{} presence sums for {} sources",
                presence.len(),
                self.presence.len()
            )));
        }
        for (a, p) in self.presence.iter_mut().zip(presence) {
            *a += p;
        }
        self.l1 += l1;
        self.samples += m;
        Ok(())
    }

    pub fn merge(&mut self, other: &Accumulators) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension(format!(
                "merging accumulators of width {} and {}",
                self.dim, other.dim
            )));
        }
        self.add(&other.presence, other.l1, other.samples)
    }
}

/// `π_k = Σ E_q[s_k] / (N·M)` and `b = Σ E_q[‖x - μ_mix‖_1] / (D·N·M)`,
/// clamped to the admissible parameter range.
pub fn update_pi_b(acc: &Accumulators) -> Result<(Vec<f64>, f64)> {
    if acc.samples == 0 || acc.dim == 0 {
        return Err(Error::Usage(
            "closed-form update needs at least one accumulated sample".into(),
        ));
    }
    let nm = acc.samples as f64;
    let pi = acc
        .presence
        .iter()
        .map(|p| (p / nm).clamp(PI_MIN, 1.0 - PI_MIN))
        .collect();
    let b = (acc.l1 / (nm * acc.dim as f64)).max(B_FLOOR);
    Ok((pi, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_presence_clamps_to_upper_bound() {
        let mut acc = Accumulators::new(2, 3);
        for _ in 0..5 {
            acc.add(&[4.0, 0.0], 1.2, 4).unwrap();
        }
        let (pi, b) = update_pi_b(&acc).unwrap();
        assert_eq!(pi, vec![1.0 - 1e-4, 1e-4]);
        assert!((b - 0.1).abs() < 1e-15);
    }

    #[test]
    fn perfect_reconstruction_floors_scale() {
        let mut acc = Accumulators::new(1, 4);
        acc.add(&[0.5], 0.0, 1).unwrap();
        assert_eq!(update_pi_b(&acc).unwrap().1, B_FLOOR);
    }

    #[test]
    fn empty_accumulator_is_usage_error() {
        assert!(matches!(
            update_pi_b(&Accumulators::new(2, 3)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn merge_equals_sequential_adds() {
        let mut a = Accumulators::new(2, 2);
        let mut b = Accumulators::new(2, 2);
        let mut all = Accumulators::new(2, 2);
        a.add(&[0.5, 1.0], 2.0, 2).unwrap();
        b.add(&[1.5, 0.0], 1.0, 2).unwrap();
        all.add(&[0.5, 1.0], 2.0, 2).unwrap();
        all.add(&[1.5, 0.0], 1.0, 2).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, all);
    }
}
