//! Stacked multi-source signals and the mixing projectors.
//!
//! A [`StackedSignal`] holds `K` sources of `M` samples each, row-major. The
//! mean projector `P` replaces every row by the across-source average and its
//! complement `P̄ = I - P` keeps the inter-source residual. Neither is ever
//! materialised as a `K x K` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x M` block of real samples, one row per source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedSignal {
    num_sources: usize,
    num_samples: usize,
    data: Vec<f64>,
}

impl StackedSignal {
    pub fn new(num_sources: usize, num_samples: usize, data: Vec<f64>) -> Result<Self> {
        if num_sources < 2 {
            return Err(Error::InvalidParam(format!(
                "a stacked signal needs at least 2 sources, got {num_sources}"
            )));
        }
        if num_samples == 0 {
            return Err(Error::InvalidParam("a stacked signal needs at least one sample".into()));
        }
        if data.len() != num_sources * num_samples {
            return Err(Error::shape(
                format!("{} values ({num_sources}x{num_samples})", num_sources * num_samples),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stacked signal".into()));
        }
        Ok(Self {
            num_sources,
            num_samples,
            data,
        })
    }

    pub fn zeros(num_sources: usize, num_samples: usize) -> Result<Self> {
        Self::new(num_sources, num_samples, vec![0.0; num_sources * num_samples])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("rows of equal length", "ragged rows"));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    /// Builds a signal from data that is already known to be valid.
    pub(crate) fn from_raw(num_sources: usize, num_samples: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), num_sources * num_samples);
        Self {
            num_sources,
            num_samples,
            data,
        }
    }

    #[inline]
    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    #[inline]
    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_sources, self.num_samples)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.num_samples..(k + 1) * self.num_samples]
    }

    pub(crate) fn row_mut(&mut self, k: usize) -> &mut [f64] {
        let m = self.num_samples;
        &mut self.data[k * m..(k + 1) * m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.num_samples)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column-wise sum of the rows, i.e. the mixture the sources add up to.
    pub fn row_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_samples];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.num_sources,
            self.num_samples,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_raw(
            self.num_sources,
            self.num_samples,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn check_finite(x: &StackedSignal) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("projector input".into()))
    }
}

/// Column-wise mean of the rows.
fn row_mean(x: &StackedSignal) -> Vec<f64> {
    let inv_k = 1.0 / x.num_sources() as f64;
    let mut mean = x.row_sum();
    mean.iter_mut().for_each(|v| *v *= inv_k);
    mean
}

/// `P x`: every row replaced by the across-source mean.
pub fn project_mean(x: &StackedSignal) -> Result<StackedSignal> {
    check_finite(x)?;
    let mean = row_mean(x);
    Ok(StackedSignal::from_raw(
        x.num_sources(),
        x.num_samples(),
        mean.repeat(x.num_sources()),
    ))
}

/// `P̄ x = x - P x`; rows of the result sum to zero.
pub fn project_residual(x: &StackedSignal) -> Result<StackedSignal> {
    check_finite(x)?;
    Ok(residual_unchecked(x))
}

pub(crate) fn residual_unchecked(x: &StackedSignal) -> StackedSignal {
    let mean = row_mean(x);
    let mut out = x.clone();
    for k in 0..x.num_sources() {
        for (o, m) in out.row_mut(k).iter_mut().zip(&mean) {
            *o -= m;
        }
    }
    out
}

/// Applies `a P + b P̄` in one pass.
pub(crate) fn spectral_apply(x: &StackedSignal, on_mean: f64, on_residual: f64) -> StackedSignal {
    let mean = row_mean(x);
    let mut out = x.clone();
    for k in 0..x.num_sources() {
        for (o, m) in out.row_mut(k).iter_mut().zip(&mean) {
            *o = on_mean * m + on_residual * (*o - m);
        }
    }
    out
}

/// `s̄`: the mixture divided evenly over `K` rows.
pub fn stack_mixture(y: &[f64], num_sources: usize) -> Result<StackedSignal> {
    if num_sources < 2 {
        return Err(Error::InvalidParam(format!(
            "mixture must be split over at least 2 sources, got {num_sources}"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture".into()));
    }
    let inv_k = 1.0 / num_sources as f64;
    let row: Vec<f64> = y.iter().map(|v| v * inv_k).collect();
    StackedSignal::new(num_sources, y.len(), row.repeat(num_sources))
}

/// A bijection on `{0, .., K-1}`; output row `i` takes input row `mapping[i]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let k = mapping.len();
        let mut seen = vec![false; k];
        for &i in &mapping {
            if i >= k || seen[i] {
                return Err(Error::InvalidParam(format!("{mapping:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(Self(mapping))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Self(inv)
    }
}

pub fn apply_permutation(x: &StackedSignal, a: &Permutation) -> Result<StackedSignal> {
    if a.len() != x.num_sources() {
        return Err(Error::shape(
            format!("permutation of length {}", x.num_sources()),
            format!("length {}", a.len()),
        ));
    }
    let mut data = Vec::with_capacity(x.as_slice().len());
    for &src in a.as_slice() {
        data.extend_from_slice(x.row(src));
    }
    Ok(StackedSignal::from_raw(x.num_sources(), x.num_samples(), data))
}

pub const MAX_PERMUTATION_SOURCES: usize = 6;

/// All `K!` permutations in lexicographic order (identity first).
pub fn all_permutations(k: usize) -> Result<Vec<Permutation>> {
    if !(2..=MAX_PERMUTATION_SOURCES).contains(&k) {
        return Err(Error::InvalidParam(format!(
            "permutation search supports 2..={MAX_PERMUTATION_SOURCES} sources, got {k}"
        )));
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; k];
    fn recurse(
        k: usize,
        current: &mut Vec<usize>,
        used: &mut [bool],
        out: &mut Vec<Permutation>,
    ) {
        if current.len() == k {
            out.push(Permutation(current.clone()));
            return;
        }
        for i in 0..k {
            if !used[i] {
                used[i] = true;
                current.push(i);
                recurse(k, current, used, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    recurse(k, &mut current, &mut used, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(rows: &[&[f64]]) -> StackedSignal {
        StackedSignal::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mean_projection_examples() {
        let p = project_mean(&sig(&[&[1.0, 3.0], &[5.0, 7.0]])).unwrap();
        assert_eq!(p, sig(&[&[3.0, 5.0], &[3.0, 5.0]]));
        let p = project_mean(&sig(&[&[3.0, 0.0], &[0.0, 0.0], &[0.0, 3.0]])).unwrap();
        assert_eq!(p, sig(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]));
    }

    #[test]
    fn residual_projection_examples() {
        let r = project_residual(&sig(&[&[1.0, 3.0], &[5.0, 7.0]])).unwrap();
        assert_eq!(r, sig(&[&[-2.0, -2.0], &[2.0, 2.0]]));
        let r = project_residual(&sig(&[&[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0]])).unwrap();
        assert!(r.as_slice().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_non_finite() {
        let x = StackedSignal::from_raw(2, 1, vec![f64::NAN, 0.0]);
        assert!(matches!(project_mean(&x), Err(Error::NonFinite(_))));
        assert!(matches!(project_residual(&x), Err(Error::NonFinite(_))));
        assert!(StackedSignal::new(2, 1, vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn stacked_mixture() {
        assert_eq!(stack_mixture(&[2.0, 4.0], 2).unwrap(), sig(&[&[1.0, 2.0], &[1.0, 2.0]]));
        assert_eq!(stack_mixture(&[3.0], 3).unwrap(), sig(&[&[1.0], &[1.0], &[1.0]]));
        assert!(stack_mixture(&[1.0], 1).is_err());
        let sbar = stack_mixture(&[0.2, -1.7, 3.3], 3).unwrap();
        assert!(project_mean(&sbar).unwrap().max_abs_diff(&sbar).unwrap() < 1e-15);
    }

    #[test]
    fn permutations() {
        let x = sig(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = Permutation::identity(2);
        assert_eq!(apply_permutation(&x, &id).unwrap(), x);
        let swap = Permutation::new(vec![1, 0]).unwrap();
        assert_eq!(apply_permutation(&x, &swap).unwrap(), sig(&[&[3.0, 4.0], &[1.0, 2.0]]));
        assert!(apply_permutation(&x, &Permutation::identity(3)).is_err());
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());

        assert_eq!(all_permutations(2).unwrap(), vec![id, swap]);
        assert_eq!(all_permutations(3).unwrap().len(), 6);
        let p4 = all_permutations(4).unwrap();
        let unique: std::collections::BTreeSet<_> = p4.iter().collect();
        assert_eq!((p4.len(), unique.len()), (24, 24));
        assert!(all_permutations(1).is_err());
        assert!(all_permutations(7).is_err());
    }

    fn arb_signal() -> impl Strategy<Value = StackedSignal> {
        (2usize..5, 1usize..12).prop_flat_map(|(k, m)| {
            prop::collection::vec(-10.0f64..10.0, k * m)
                .prop_map(move |d| StackedSignal::new(k, m, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn projector_algebra(x in arb_signal()) {
            let p = project_mean(&x).unwrap();
            let r = project_residual(&x).unwrap();
            prop_assert!(project_mean(&p).unwrap().max_abs_diff(&p).unwrap() < 1e-12);
            prop_assert!(project_residual(&r).unwrap().max_abs_diff(&r).unwrap() < 1e-12);
            prop_assert!(project_mean(&r).unwrap().as_slice().iter().all(|v| v.abs() < 1e-12));
            prop_assert!(p.add(&r).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
            let inner = p.dot(&r).unwrap();
            prop_assert!(inner.abs() <= 1e-10 * (1.0 + x.squared_norm()));
            for v in r.row_sum() {
                prop_assert!(v.abs() < 1e-12);
            }
        }

        #[test]
        fn mean_commutes_with_permutation(x in arb_signal(), seed in 0usize..720) {
            let perms = all_permutations(x.num_sources()).unwrap();
            let a = &perms[seed % perms.len()];
            let lhs = project_mean(&apply_permutation(&x, a).unwrap()).unwrap();
            let rhs = apply_permutation(&project_mean(&x).unwrap(), a).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
            let back = apply_permutation(&apply_permutation(&x, a).unwrap(), &a.inverse()).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
