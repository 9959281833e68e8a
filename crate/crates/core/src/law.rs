use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel::{chunked_sum, chunked_vec_sum};

/// Equally weighted atoms in `R^dim` standing for the law of a state at one
/// grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalLaw {
    atoms: Vec<f64>,
    dim: usize,
    time_index: usize,
}

impl EmpiricalLaw {
    /// `atoms` is row-major, `dim` values per atom.
    pub fn new(atoms: Vec<f64>, dim: usize, time_index: usize) -> Result<Self> {
        if dim == 0 || atoms.is_empty() || atoms.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "empirical law needs at least one atom of dimension {dim} (got {} values)",
                atoms.len()
            )));
        }
        Ok(Self {
            atoms,
            dim,
            time_index,
        })
    }

    pub fn scalar(atoms: Vec<f64>, time_index: usize) -> Result<Self> {
        Self::new(atoms, 1, time_index)
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    #[inline]
    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len();
        let s = chunked_vec_sum(n, self.dim, |i, acc| {
            for (a, v) in acc.iter_mut().zip(self.atom(i)) {
                *a += v;
            }
        });
        s.into_iter().map(|v| v / n as f64).collect()
    }

    /// Average of `g` over the atoms; fails on the first non-finite value.
    pub fn expectation<G>(&self, g: G) -> Result<f64>
    where
        G: Fn(&[f64]) -> f64 + Sync,
    {
        empirical_expectation(self, g)
    }
}

pub fn empirical_expectation<G>(law: &EmpiricalLaw, g: G) -> Result<f64>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    let n = law.len();
    let bad = (0..n)
        .into_par_iter()
        .find_first(|&i| !g(law.atom(i)).is_finite());
    if let Some(atom) = bad {
        return Err(Error::NonFiniteAtom { atom });
    }
    Ok(chunked_sum(n, |i| g(law.atom(i))) / n as f64)
}
