use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time discretization of `[t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "endpoints must be finite, got [{t0}, {t1}]"
            )));
        }
        if t1 <= t0 {
            return Err(Error::InvalidGrid(format!(
                "empty interval: t1 = {t1} must exceed t0 = {t0}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    /// `t_k = t0 + k dt`, with the last node pinned to `t1`.
    pub fn node(&self, k: usize) -> f64 {
        assert!(k <= self.n_steps, "node index {k} beyond {}", self.n_steps);
        if k == self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.node(k)).collect()
    }

    /// Index of the node equal to `t` (up to a relative tolerance of 1e-9 of dt).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > 1e-9 {
            return None;
        }
        Some(k as usize)
    }

    /// Same interval with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.t0, self.t1, self.n_steps * factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_steps_on_unit_interval() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.dt(), 0.25);
    }

    #[test]
    fn single_step() {
        let g = TimeGrid::new(0.0, 2.0, 1).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 2.0]);
        assert_eq!(g.dt(), 2.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(TimeGrid::new(0.5, 0.5, 4).is_err());
        assert!(TimeGrid::new(1.0, 0.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, f64::INFINITY, 3).is_err());
    }

    #[test]
    fn index_lookup() {
        let g = TimeGrid::new(0.0, 2.0, 128).unwrap();
        assert_eq!(g.index_of(1.0), Some(64));
        assert_eq!(g.index_of(2.0), Some(128));
        assert_eq!(g.index_of(0.003), None);
        assert_eq!(g.index_of(-1.0), None);
    }

    proptest::proptest! {
        #[test]
        fn nodes_strictly_increasing(t0 in -10.0f64..10.0, len in 1e-3f64..50.0, n in 1usize..500) {
            let g = TimeGrid::new(t0, t0 + len, n).unwrap();
            let nodes = g.nodes();
            proptest::prop_assert_eq!(nodes[0], t0);
            proptest::prop_assert_eq!(*nodes.last().unwrap(), t0 + len);
            proptest::prop_assert!(nodes.windows(2).all(|w| w[1] > w[0]));
            proptest::prop_assert!(g.dt() > 0.0);
        }
    }
}
