//! Distance heads over embedding differences.
//!
//! A head maps a pair of embeddings to `||z1 - z2||` for some (possibly
//! asymmetric) semi-norm. Symmetric heads use an `Lp` norm. The asymmetric
//! head is a wide norm: a sum of components `||W_i relu(x :: -x)||_2` where
//! `::` concatenates. Each component is positively homogeneous and
//! subadditive but in general `||x|| != ||-x||`. Subadditivity needs the
//! matrices to be entrywise non-negative: `relu(x + y) <= relu(x) + relu(y)`
//! only carries through `W` when `W >= 0`. Training keeps them there by
//! projection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{GradBuffer, Parameters};
use crate::error::{check_dim, Error, Result};
use crate::seed::Rng;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// `||z1 - z2||_p`.
pub fn p_norm_dist(z1: &[f64], z2: &[f64], p: f64) -> Result<f64> {
    check_dim(z1.len(), z2.len())?;
    check_p(p)?;
    let diff: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a - b).collect();
    Ok(p_norm(&diff, p))
}

fn check_p(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("p-norm needs finite p >= 1, got {p}")))
    }
}

fn p_norm(v: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        v.iter().map(|x| x.abs()).sum()
    } else if p == 2.0 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Gradient of `||v||_p`; zero at the origin and (for `p = 1`) on zero coordinates.
fn p_norm_grad(v: &[f64], p: f64, norm: f64) -> Vec<f64> {
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    if p == 1.0 {
        return v.iter().map(|&x| sign(x)).collect();
    }
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| sign(x) * (x.abs() / norm).powf(p - 1.0)).collect()
}

/// `||W x||_2` with `W` given as rows.
pub fn mahalanobis_norm(x: &[f64], w: &[Vec<f64>]) -> Result<f64> {
    let mut sq = 0.0;
    for row in w {
        check_dim(x.len(), row.len())?;
        let y: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        sq += y * y;
    }
    Ok(sq.sqrt())
}

/// `relu(x :: -x)`.
fn split_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).chain(x.iter().map(|v| (-v).max(0.0))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentShape {
    pub rows: usize,
    pub cols: usize,
}

/// Component matrices of an asymmetric wide norm, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideNormParams {
    components: Vec<ComponentShape>,
    data: Vec<f64>,
    pub epsilon: f64,
}

/// Forward values reused by the backward pass.
#[derive(Debug, Clone)]
pub struct WideNormTrace {
    relu: Vec<f64>,
    outputs: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl WideNormParams {
    /// Components with the given row counts over embeddings of size `dim`,
    /// initialised uniform in `[0, sqrt(6 / (rows + 2 dim)))`.
    pub fn init(dim: usize, rows: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut params = Self::zeros(dim, rows)?;
        let mut offset = 0;
        for c in params.components.clone() {
            let bound = (6.0 / (c.rows + c.cols) as f64).sqrt();
            for w in &mut params.data[offset..offset + c.rows * c.cols] {
                *w = rng.gen_range(0.0..bound);
            }
            offset += c.rows * c.cols;
        }
        Ok(params)
    }

    pub fn zeros(dim: usize, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("wide norm needs at least one component".into()));
        }
        let components: Vec<ComponentShape> = rows.iter().map(|&r| ComponentShape { rows: r, cols: 2 * dim }).collect();
        let total = components.iter().map(|c| c.rows * c.cols).sum();
        let params = WideNormParams { components, data: vec![0.0; total], epsilon: DEFAULT_EPSILON };
        params.validate()?;
        Ok(params)
    }

    /// Builds from explicit matrices, each with `2 * dim` columns.
    pub fn from_matrices(matrices: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mut components = Vec::new();
        let mut data = Vec::new();
        for m in matrices {
            let cols = m.first().map_or(0, Vec::len);
            if m.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidConfig("ragged wide norm matrix".into()));
            }
            components.push(ComponentShape { rows: m.len(), cols });
            data.extend(m.into_iter().flatten());
        }
        let params = WideNormParams { components, data, epsilon: DEFAULT_EPSILON };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.components.first() else {
            return Err(Error::InvalidConfig("wide norm needs at least one component".into()));
        };
        if first.cols == 0 || first.cols % 2 != 0 {
            return Err(Error::InvalidConfig("wide norm columns must be 2 * dim".into()));
        }
        for c in &self.components {
            check_dim(first.cols, c.cols)?;
            if c.rows == 0 || c.rows > c.cols {
                return Err(Error::InvalidConfig(format!("component rows {} must be in 1..={}", c.rows, c.cols)));
            }
        }
        check_dim(self.components.iter().map(|c| c.rows * c.cols).sum(), self.data.len())?;
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Malformed { what: "wide norm", reason: "entries must be finite and non-negative".into() });
        }
        Ok(())
    }

    /// Clamps every entry to be non-negative.
    pub fn project(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    pub fn dim(&self) -> usize {
        self.components[0].cols / 2
    }

    pub fn components(&self) -> &[ComponentShape] {
        &self.components
    }

    /// Multiplies every matrix by `alpha >= 0`.
    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn trace(&self, x: &[f64]) -> Result<WideNormTrace> {
        check_dim(self.dim(), x.len())?;
        let relu = split_relu(x);
        let mut outputs = Vec::with_capacity(self.components.len());
        let mut norms = Vec::with_capacity(self.components.len());
        let mut offset = 0;
        for c in &self.components {
            let w = &self.data[offset..offset + c.rows * c.cols];
            let y: Vec<f64> = w
                .chunks_exact(c.cols)
                .map(|row| row.iter().zip(&relu).map(|(a, b)| a * b).sum())
                .collect();
            norms.push(y.iter().map(|v| v * v).sum::<f64>().sqrt());
            outputs.push(y);
            offset += c.rows * c.cols;
        }
        Ok(WideNormTrace { relu, outputs, norms })
    }

    /// Accumulates `upstream * d||x||/dW` into `grads` and returns `upstream * d||x||/dx`.
    pub fn backward(&self, trace: &WideNormTrace, upstream: f64, grads: &mut GradBuffer) -> Result<Vec<f64>> {
        check_dim(self.data.len(), grads.data.len())?;
        let cols = self.components[0].cols;
        let dim = cols / 2;
        let mut d_relu = vec![0.0; cols];
        let mut offset = 0;
        for (k, c) in self.components.iter().enumerate() {
            let len = c.rows * c.cols;
            let scale = upstream / trace.norms[k].max(self.epsilon);
            let w = &self.data[offset..offset + len];
            let gw = &mut grads.data[offset..offset + len];
            for (r, &y) in trace.outputs[k].iter().enumerate() {
                let g = scale * y;
                if g == 0.0 {
                    continue;
                }
                let row = r * cols..(r + 1) * cols;
                for ((gwi, &wi), (&ri, dr)) in gw[row.clone()].iter_mut().zip(&w[row]).zip(trace.relu.iter().zip(d_relu.iter_mut())) {
                    *gwi += g * ri;
                    *dr += g * wi;
                }
            }
            offset += len;
        }
        Ok((0..dim)
            .map(|i| {
                if trace.relu[i] > 0.0 {
                    d_relu[i]
                } else if trace.relu[i + dim] > 0.0 {
                    -d_relu[i + dim]
                } else {
                    0.0
                }
            })
            .collect())
    }
}

impl WideNormTrace {
    pub fn value(&self) -> f64 {
        self.norms.iter().sum()
    }
}

impl Parameters for WideNormParams {
    fn values(&self) -> &[f64] {
        &self.data
    }

    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// `sum_i ||W_i relu(x :: -x)||_2`.
pub fn asym_wide_norm(x: &[f64], params: &WideNormParams) -> Result<f64> {
    Ok(params.trace(x)?.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PNormHead {
    pub p: f64,
}

impl Default for PNormHead {
    fn default() -> Self {
        PNormHead { p: 1.0 }
    }
}

/// Distance head applied to `z1 - z2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DistanceHead {
    Pnorm(PNormHead),
    Widenorm(WideNormParams),
}

/// Cached forward state of [`DistanceHead::forward`].
#[derive(Debug, Clone)]
pub enum HeadTrace {
    Pnorm { diff: Vec<f64>, value: f64 },
    Widenorm(WideNormTrace),
}

impl HeadTrace {
    pub fn value(&self) -> f64 {
        match self {
            HeadTrace::Pnorm { value, .. } => *value,
            HeadTrace::Widenorm(t) => t.value(),
        }
    }
}

impl DistanceHead {
    pub fn l1() -> Self {
        DistanceHead::Pnorm(PNormHead { p: 1.0 })
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self, DistanceHead::Pnorm(_))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            DistanceHead::Pnorm(h) => check_p(h.p),
            DistanceHead::Widenorm(w) => {
                w.validate()?;
                check_dim(dim, w.dim())
            }
        }
    }

    /// Restores parameter constraints after an unconstrained update.
    pub fn project(&mut self) {
        if let DistanceHead::Widenorm(w) = self {
            w.project();
        }
    }

    pub fn forward(&self, z1: &[f64], z2: &[f64]) -> Result<HeadTrace> {
        check_dim(z1.len(), z2.len())?;
        let diff: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a - b).collect();
        match self {
            DistanceHead::Pnorm(h) => {
                check_p(h.p)?;
                let value = p_norm(&diff, h.p);
                Ok(HeadTrace::Pnorm { diff, value })
            }
            DistanceHead::Widenorm(w) => Ok(HeadTrace::Widenorm(w.trace(&diff)?)),
        }
    }

    pub fn distance(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        Ok(self.forward(z1, z2)?.value())
    }

    /// Accumulates head-parameter gradients (scaled by `upstream`) and
    /// returns `upstream * d/d(z1 - z2)`; the gradient for `z2` is its negation.
    pub fn backward(&self, trace: &HeadTrace, upstream: f64, grads: &mut GradBuffer) -> Result<Vec<f64>> {
        match (self, trace) {
            (DistanceHead::Pnorm(h), HeadTrace::Pnorm { diff, value }) => {
                Ok(p_norm_grad(diff, h.p, *value).into_iter().map(|g| g * upstream).collect())
            }
            (DistanceHead::Widenorm(w), HeadTrace::Widenorm(t)) => w.backward(t, upstream, grads),
            _ => Err(Error::InvalidConfig("head trace does not match head kind".into())),
        }
    }
}

impl Parameters for DistanceHead {
    fn values(&self) -> &[f64] {
        match self {
            DistanceHead::Pnorm(_) => &[],
            DistanceHead::Widenorm(w) => w.values(),
        }
    }

    fn values_mut(&mut self) -> &mut [f64] {
        match self {
            DistanceHead::Pnorm(_) => &mut [],
            DistanceHead::Widenorm(w) => w.values_mut(),
        }
    }
}

/// Free-function form of [`DistanceHead::distance`].
pub fn head_distance(head: &DistanceHead, z1: &[f64], z2: &[f64]) -> Result<f64> {
    head.distance(z1, z2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::seed;

    fn witness() -> WideNormParams {
        WideNormParams::from_matrices(vec![vec![vec![1.0, 0.0], vec![0.0, 2.0]]]).unwrap()
    }

    #[test]
    fn l1_arithmetic() {
        assert_eq!(p_norm_dist(&[1.0, 2.0], &[0.0, 0.0], 1.0).unwrap(), 3.0);
        assert_eq!(p_norm_dist(&[1.5, -2.0], &[1.5, -2.0], 1.0).unwrap(), 0.0);
        let (a, b) = ([0.3, -1.2, 4.0], [2.0, 0.1, -0.5]);
        for p in [1.0, 2.0, 3.5] {
            assert_eq!(p_norm_dist(&a, &b, p).unwrap(), p_norm_dist(&b, &a, p).unwrap());
        }
        assert!(p_norm_dist(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(p_norm_dist(&[1.0], &[2.0], 0.5).is_err());
    }

    #[test]
    fn mahalanobis() {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(mahalanobis_norm(&[3.0, 4.0], &id).unwrap(), 5.0);
        assert_eq!(mahalanobis_norm(&[0.0, 0.0], &id).unwrap(), 0.0);
        let two = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        assert_eq!(mahalanobis_norm(&[3.0, 4.0], &two).unwrap(), 10.0);
        assert!(mahalanobis_norm(&[1.0], &two).is_err());
    }

    #[test]
    fn wide_norm_hand_values() {
        let w = witness();
        assert_eq!(asym_wide_norm(&[2.0], &w).unwrap(), 2.0);
        assert_eq!(asym_wide_norm(&[-2.0], &w).unwrap(), 4.0);
        assert_eq!(asym_wide_norm(&[0.0], &w).unwrap(), 0.0);
        assert!(asym_wide_norm(&[1.0, 2.0], &w).is_err());
    }

    #[test]
    fn head_dispatch() {
        let wide = DistanceHead::Widenorm(witness());
        assert_eq!(wide.distance(&[2.0], &[0.0]).unwrap(), 2.0);
        assert_eq!(wide.distance(&[0.0], &[2.0]).unwrap(), 4.0);
        assert_eq!(wide.distance(&[1.0], &[1.0]).unwrap(), 0.0);
        let l1 = DistanceHead::l1();
        assert_eq!(l1.distance(&[1.0, 5.0], &[3.0, 2.0]).unwrap(), l1.distance(&[3.0, 2.0], &[1.0, 5.0]).unwrap());
        assert!(l1.distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(WideNormParams::from_matrices(vec![vec![vec![1.0, -0.5]]]).is_err());
        let mut w = WideNormParams::init(1, &[2], &mut seed::rng(0)).unwrap();
        w.values_mut()[0] = -1.0;
        w.project();
        assert_eq!(w.values()[0], 0.0);
        w.validate().unwrap();
    }

    #[test]
    fn component_rows_bounded() {
        assert!(WideNormParams::zeros(2, &[5]).is_err());
        assert!(WideNormParams::zeros(2, &[4, 2]).is_ok());
        assert!(WideNormParams::zeros(2, &[]).is_err());
    }

    #[test]
    fn homogeneity_of_random_wide_norm() {
        let mut rng = seed::rng(11);
        let w = WideNormParams::init(5, &[10, 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (a, b) = (asym_wide_norm(&x, &w).unwrap(), asym_wide_norm(&x2, &w).unwrap());
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.max(1.0));
    }

    fn head_grad_error(head: DistanceHead, dim: usize, seed_value: u64) -> (f64, f64) {
        let mut rng = seed::rng(seed_value);
        let z1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // w.r.t. embedding difference (first argument)
        let h = head.clone();
        let z2c = z2.clone();
        let input_err = grad_check(&z1, 1e-5, 50, &mut rng, |z| {
            let t = h.forward(z, &z2c).unwrap();
            let mut g = GradBuffer::zeros_like(&h);
            (t.value(), h.backward(&t, 1.0, &mut g).unwrap())
        });
        // w.r.t. head parameters
        let template = head.clone();
        let param_err = grad_check(head.values(), 1e-5, 50, &mut rng, |flat| {
            let mut h = template.clone();
            h.values_mut().copy_from_slice(flat);
            let t = h.forward(&z1, &z2).unwrap();
            let mut g = GradBuffer::zeros_like(&h);
            h.backward(&t, 1.0, &mut g).unwrap();
            (t.value(), g.data)
        });
        (input_err, param_err)
    }

    #[test]
    fn head_gradients() {
        for s in 0..5 {
            let wide = WideNormParams::init(4, &[8, 5], &mut seed::rng(s)).unwrap();
            let (ie, pe) = head_grad_error(DistanceHead::Widenorm(wide), 4, 50 + s);
            assert!(ie < 1e-4 && pe < 1e-4, "wide: {ie} {pe}");
            for p in [1.0, 2.0, 3.0] {
                let (ie, pe) = head_grad_error(DistanceHead::Pnorm(PNormHead { p }), 4, 90 + s);
                assert!(ie < 1e-4, "p={p}: {ie}");
                assert_eq!(pe, 0.0);
            }
        }
    }

    #[test]
    fn l2_gradient_at_origin_is_finite() {
        let w = witness();
        let t = w.trace(&[0.0]).unwrap();
        let mut g = GradBuffer::zeros_like(&w);
        let dx = w.backward(&t, 1.0, &mut g).unwrap();
        assert!(dx.iter().chain(&g.data).all(|v| v.is_finite()));
    }
}
