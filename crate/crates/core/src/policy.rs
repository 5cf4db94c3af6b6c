//! Diagonal-Gaussian MLP policy with hand-written backward and
//! forward-mode passes, plus the `RNDP` weight file format.
//!
//! Flat parameter order: for each layer its row-major weights (out × in)
//! followed by its bias, then the log-std vector.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const DEFAULT_LAYER_SIZES: [usize; 5] = [54, 100, 50, 25, 2];
pub const MAGIC: &[u8; 4] = b"RNDP";
pub const FORMAT_VERSION: u32 = 1;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("input has {got} elements, expected {expected}")]
    InputShape { got: usize, expected: usize },
    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),
    #[error("flat vector has {got} elements, expected {expected}")]
    FlatShape { got: usize, expected: usize },
    #[error("layer sizes must list at least an input and an output width, all nonzero")]
    BadLayerSizes,
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("layer {layer} is {rows}x{cols} but the previous layer emits {prev}")]
    LayerShape { layer: usize, rows: usize, cols: usize, prev: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    Trailing(usize),
    #[error("non-finite parameter at flat index {0}")]
    NonFiniteParameter(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            out.push(self.bias[r] + dot(row, x));
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub std: Vec<f64>,
}

impl ActionDistribution {
    /// Draw `mean + std * z`; returns the action and the standard-normal `z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = (0..self.mean.len()).map(|_| StandardNormal.sample(rng)).collect();
        let a = self.mean.iter().zip(&self.std).zip(&z).map(|((m, s), z)| m + s * z).collect();
        (a, z)
    }

    pub fn log_prob(&self, action: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(&self.log_std)
            .zip(action)
            .map(|(((m, s), ls), a)| -0.5 * ((a - m) / s).powi(2) - ls - 0.5 * LOG_2PI)
            .sum()
    }

    /// KL(self ‖ other) for diagonal Gaussians.
    pub fn kl(&self, other: &ActionDistribution) -> f64 {
        let mut kl = 0.0;
        for k in 0..self.mean.len() {
            let (m0, s0, l0) = (self.mean[k], self.std[k], self.log_std[k]);
            let (m1, s1, l1) = (other.mean[k], other.std[k], other.log_std[k]);
            kl += l1 - l0 + (s0 * s0 + (m0 - m1).powi(2)) / (2.0 * s1 * s1) - 0.5;
        }
        kl
    }
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[l]` the
/// output of layer `l` (tanh for hidden layers, affine for the last).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn mean(&self) -> &[f64] {
        self.acts.last().expect("non-empty cache")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    layers: Vec<DenseLayer>,
    log_std: Vec<f64>,
}

impl PolicyParameters {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "invalid layer sizes {sizes:?}");
        let layers = sizes.windows(2).map(|w| DenseLayer::zeros(w[1], w[0])).collect();
        Self { layers, log_std: vec![0.0; *sizes.last().unwrap()] }
    }

    /// Glorot-uniform weights, zero biases, unit std.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut p = Self::zeros(sizes);
        for layer in &mut p.layers {
            let limit = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        p
    }

    pub fn from_parts(layers: Vec<DenseLayer>, log_std: Vec<f64>) -> Result<Self, PolicyError> {
        if layers.is_empty() {
            return Err(PolicyError::BadLayerSizes);
        }
        for (i, l) in layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return Err(PolicyError::BadLayerSizes);
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(PolicyError::LayerShape { layer: i, rows: l.rows, cols: l.cols, prev: l.cols });
            }
            if i > 0 && layers[i - 1].rows != l.cols {
                return Err(PolicyError::LayerShape { layer: i, rows: l.rows, cols: l.cols, prev: layers[i - 1].rows });
            }
        }
        let out = layers.last().unwrap().rows;
        if log_std.len() != out {
            return Err(PolicyError::FlatShape { got: log_std.len(), expected: out });
        }
        let p = Self { layers, log_std };
        if let Some(i) = p.to_flat().iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFiniteParameter(i));
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        &mut self.log_std
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].cols];
        s.extend(self.layers.iter().map(|l| l.rows));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum::<usize>() + self.log_std.len()
    }

    fn log_std_offset(&self) -> usize {
        self.num_params() - self.log_std.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        if flat.len() != self.num_params() {
            return Err(PolicyError::FlatShape { got: flat.len(), expected: self.num_params() });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + n]);
            at += n;
            l.bias.copy_from_slice(&flat[at..at + l.rows]);
            at += l.rows;
        }
        self.log_std.copy_from_slice(&flat[at..]);
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, PolicyError> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    fn check_input(&self, obs: &[f64]) -> Result<(), PolicyError> {
        if obs.len() != self.input_dim() {
            return Err(PolicyError::InputShape { got: obs.len(), expected: self.input_dim() });
        }
        if let Some(i) = obs.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFiniteInput(i));
        }
        Ok(())
    }

    pub fn forward_cache(&self, obs: &[f64]) -> Result<ForwardCache, PolicyError> {
        self.check_input(obs)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(obs.to_vec());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(l.rows);
            l.affine(acts.last().unwrap(), &mut out);
            if i < last {
                out.iter_mut().for_each(|x| *x = x.tanh());
            }
            acts.push(out);
        }
        Ok(ForwardCache { acts })
    }

    pub fn distribution_from(&self, mean: Vec<f64>) -> ActionDistribution {
        ActionDistribution { mean, log_std: self.log_std.clone(), std: self.log_std.iter().map(|s| s.exp()).collect() }
    }

    pub fn forward(&self, obs: &[f64]) -> Result<ActionDistribution, PolicyError> {
        let cache = self.forward_cache(obs)?;
        Ok(self.distribution_from(cache.acts.last().unwrap().clone()))
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64, PolicyError> {
        Ok(self.forward(obs)?.log_prob(action))
    }

    /// Accumulate `scale * (∂mean/∂θ)ᵀ d_mean` into the weight and bias
    /// part of `grad`. The log-std entries are left untouched.
    pub fn backward_mean(&self, cache: &ForwardCache, d_mean: &[f64], scale: f64, grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.param_count();
        }
        let mut delta: Vec<f64> = d_mean.iter().map(|d| d * scale).collect();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let input = &cache.acts[li];
            let off = offsets[li];
            for r in 0..l.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + r * l.cols..off + (r + 1) * l.cols];
                for (gw, x) in g.iter_mut().zip(input) {
                    *gw += d * x;
                }
                grad[off + l.rows * l.cols + r] += d;
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; l.cols];
            for r in 0..l.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &l.weights[r * l.cols..(r + 1) * l.cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, h) in prev.iter_mut().zip(input) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
    }

    /// Directional derivative of the mean along the flat direction `dir`.
    pub fn jvp_mean(&self, cache: &ForwardCache, dir: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut at = 0;
        let mut dh = vec![0.0; self.input_dim()];
        for (li, l) in self.layers.iter().enumerate() {
            let dw = &dir[at..at + l.rows * l.cols];
            let db = &dir[at + l.rows * l.cols..at + l.param_count()];
            at += l.param_count();
            let h = &cache.acts[li];
            let mut dz = Vec::with_capacity(l.rows);
            for r in 0..l.rows {
                let w = &l.weights[r * l.cols..(r + 1) * l.cols];
                let dwr = &dw[r * l.cols..(r + 1) * l.cols];
                dz.push(db[r] + dot(dwr, h) + dot(w, &dh));
            }
            if li < last {
                let out = &cache.acts[li + 1];
                for (d, y) in dz.iter_mut().zip(out) {
                    *d *= 1.0 - y * y;
                }
            }
            dh = dz;
        }
        dh
    }

    /// Exact gradient of `log_prob(obs, action)` with respect to every
    /// parameter, in flat order.
    pub fn grad_log_prob(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let cache = self.forward_cache(obs)?;
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_grad_log_prob(&cache, action, 1.0, &mut grad);
        Ok(grad)
    }

    /// `grad += weight * ∇θ log π(action | obs)` using a precomputed cache.
    pub fn accumulate_grad_log_prob(&self, cache: &ForwardCache, action: &[f64], weight: f64, grad: &mut [f64]) {
        let mean = cache.mean();
        let mut d_mean = Vec::with_capacity(mean.len());
        let off = self.log_std_offset();
        for k in 0..mean.len() {
            let inv_var = (-2.0 * self.log_std[k]).exp();
            let diff = action[k] - mean[k];
            d_mean.push(diff * inv_var);
            grad[off + k] += weight * (diff * diff * inv_var - 1.0);
        }
        self.backward_mean(cache, &d_mean, weight, grad);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 + 8 * self.num_params());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            b.extend_from_slice(&(l.rows as u32).to_le_bytes());
            b.extend_from_slice(&(l.cols as u32).to_le_bytes());
            for x in l.weights.iter().chain(&l.bias) {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        for x in &self.log_std {
            b.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = Reader { bytes, at: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(PolicyError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PolicyError::Version(version));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(PolicyError::BadLayerSizes);
        }
        let mut layers = Vec::with_capacity(count.min(64));
        for i in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(PolicyError::BadLayerSizes);
            }
            if let Some(prev) = layers.last().map(|l: &DenseLayer| l.rows) {
                if prev != cols {
                    return Err(PolicyError::LayerShape { layer: i, rows, cols, prev });
                }
            }
            let n = rows.checked_mul(cols).ok_or(PolicyError::Truncated(r.at))?;
            let weights = r.f64s(n)?;
            let bias = r.f64s(rows)?;
            layers.push(DenseLayer { rows, cols, weights, bias });
        }
        let log_std = r.f64s(layers.last().unwrap().rows)?;
        let body_end = r.at;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(PolicyError::Checksum { stored, computed });
        }
        if r.at != bytes.len() {
            return Err(PolicyError::Trailing(bytes.len() - r.at));
        }
        Self::from_parts(layers, log_std)
    }

    /// Write atomically: a sibling temp file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let io = |source| PolicyError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("rndp.tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = fs::read(path).map_err(|source| PolicyError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PolicyError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(PolicyError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PolicyError> {
        let len = n.checked_mul(8).ok_or(PolicyError::Truncated(self.bytes.len()))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_policy(seed: u64, sizes: &[usize]) -> PolicyParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParameters::init(sizes, &mut rng);
        for b in p.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        for s in &mut p.log_std {
            *s = rng.random_range(-0.7..0.3);
        }
        p
    }

    #[test]
    fn default_architecture_size() {
        let p = PolicyParameters::zeros(&DEFAULT_LAYER_SIZES);
        assert_eq!(p.num_params(), 54 * 100 + 100 + 100 * 50 + 50 + 50 * 25 + 25 + 25 * 2 + 2 + 2);
        assert_eq!(p.layer_sizes(), DEFAULT_LAYER_SIZES.to_vec());
    }

    #[test]
    fn zero_network() {
        let p = PolicyParameters::zeros(&DEFAULT_LAYER_SIZES);
        let d = p.forward(&[0.3; 54]).unwrap();
        assert_eq!(d.mean, vec![0.0, 0.0]);
        assert_eq!(d.std, vec![1.0, 1.0]);
        assert!((d.log_prob(&[0.0, 0.0]) + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn zero_obs_gives_output_bias() {
        let mut p = random_policy(3, &DEFAULT_LAYER_SIZES);
        for l in &mut p.layers {
            l.bias.fill(0.0);
        }
        p.layers.last_mut().unwrap().bias = vec![0.25, -0.75];
        let d = p.forward(&[0.0; 54]).unwrap();
        assert_eq!(d.mean, vec![0.25, -0.75]);
    }

    #[test]
    fn golden_forward() {
        let p = PolicyParameters::init(&DEFAULT_LAYER_SIZES, &mut ChaCha8Rng::seed_from_u64(7));
        let obs: Vec<f64> = (0..54).map(|i| ((i as f64) * 0.37).sin()).collect();
        let d = p.forward(&obs).unwrap();
        let golden = [GOLDEN_MEAN_0, GOLDEN_MEAN_1];
        for k in 0..2 {
            assert!((d.mean[k] - golden[k]).abs() < 1e-12, "{:?}", d.mean);
        }
    }

    const GOLDEN_MEAN_0: f64 = 0.06357713734521608;
    const GOLDEN_MEAN_1: f64 = -0.11160021780814676;

    #[test]
    fn rejects_bad_input() {
        let p = PolicyParameters::zeros(&[3, 2]);
        assert!(matches!(p.forward(&[0.0, f64::NAN, 0.0]), Err(PolicyError::NonFiniteInput(1))));
        assert!(matches!(p.forward(&[0.0]), Err(PolicyError::InputShape { .. })));
    }

    #[test]
    fn log_prob_scaling() {
        let mut p = PolicyParameters::zeros(&[2, 2]);
        let at_mode = p.log_prob(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        p.log_std = vec![2f64.ln(); 2];
        let doubled = p.log_prob(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((at_mode - doubled - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        // midpoint quadrature of exp(log_prob) over ±8σ
        let p = random_policy(11, &[3, 4, 2]);
        let obs = [0.2, -0.4, 0.9];
        let d = p.forward(&obs).unwrap();
        let n = 400;
        let (mut total, mut m0) = (0.0, 0.0);
        let h: Vec<f64> = d.std.iter().map(|s| 16.0 * s / n as f64).collect();
        for i in 0..n {
            for j in 0..n {
                let a0 = d.mean[0] - 8.0 * d.std[0] + (i as f64 + 0.5) * h[0];
                let a1 = d.mean[1] - 8.0 * d.std[1] + (j as f64 + 0.5) * h[1];
                let w = p.log_prob(&obs, &[a0, a1]).unwrap().exp() * h[0] * h[1];
                total += w;
                m0 += w * a0;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert!((m0 - d.mean[0]).abs() < 1e-6);
    }

    #[test]
    fn log_std_gradient_at_mode() {
        let p = PolicyParameters::zeros(&[4, 3, 2]);
        let g = p.grad_log_prob(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0]).unwrap();
        let n = g.len();
        assert_eq!(&g[n - 2..], &[-1.0, -1.0]);
    }

    fn central_difference(p: &PolicyParameters, obs: &[f64], action: &[f64], h: f64) -> Vec<f64> {
        let base = p.to_flat();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let fp = p.with_flat(&plus).unwrap().log_prob(obs, action).unwrap();
                let fm = p.with_flat(&minus).unwrap().log_prob(obs, action).unwrap();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let p = random_policy(seed, &[5, 7, 4, 2]);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let obs: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let action: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = p.grad_log_prob(&obs, &action).unwrap();
            let fd = central_difference(&p, &obs, &action, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 + 1e-4 * b.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let p = random_policy(4, &[5, 6, 3, 2]);
        let obs = [0.1, -0.3, 0.5, 0.7, -0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cache = p.forward_cache(&obs).unwrap();
        let jv = p.jvp_mean(&cache, &dir);
        let h = 1e-6;
        let flat = p.to_flat();
        let shifted = |s: f64| {
            let f: Vec<f64> = flat.iter().zip(&dir).map(|(x, d)| x + s * d).collect();
            p.with_flat(&f).unwrap().forward(&obs).unwrap().mean
        };
        let (up, down) = (shifted(h), shifted(-h));
        for k in 0..2 {
            assert!((jv[k] - (up[k] - down[k]) / (2.0 * h)).abs() < 1e-7);
        }
        // adjoint identity: <J v, u> = <v, Jᵀ u>
        let u = [0.3, -1.2];
        let mut jt_u = vec![0.0; p.num_params()];
        p.backward_mean(&cache, &u, 1.0, &mut jt_u);
        let lhs = jv[0] * u[0] + jv[1] * u[1];
        let rhs: f64 = dir.iter().zip(&jt_u).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn sampling_moments() {
        let mut p = PolicyParameters::zeros(&[2, 2]);
        p.layers[0].bias = vec![1.5, -0.5];
        p.log_std = vec![0.3f64.ln(), 2f64.ln()];
        let d = p.forward(&[0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut s = [0.0; 2];
        let mut s2 = [0.0; 2];
        for _ in 0..n {
            let (a, z) = d.sample(&mut rng);
            for k in 0..2 {
                assert_eq!(a[k], d.mean[k] + d.std[k] * z[k]);
                s[k] += a[k];
                s2[k] += a[k] * a[k];
            }
        }
        for k in 0..2 {
            let m = s[k] / n as f64;
            let sd = (s2[k] / n as f64 - m * m).sqrt();
            assert!((m - d.mean[k]).abs() < 0.01 * d.std[k].max(d.mean[k].abs()), "{m}");
            assert!((sd - d.std[k]).abs() < 0.01 * d.std[k], "{sd}");
        }
    }

    #[test]
    fn kl_closed_form() {
        let a = ActionDistribution { mean: vec![0.0], log_std: vec![0.0], std: vec![1.0] };
        let b = ActionDistribution { mean: vec![0.0], log_std: vec![2f64.ln()], std: vec![2.0] };
        assert!((a.kl(&b) - (2f64.ln() - 0.5 + 0.125)).abs() < 1e-12);
        assert_eq!(a.kl(&a), 0.0);
    }

    #[test]
    fn round_trip_bit_exact() {
        let p = random_policy(8, &DEFAULT_LAYER_SIZES);
        let q = PolicyParameters::from_bytes(&p.to_bytes()).unwrap();
        let (a, b) = (p.to_flat(), q.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.rndp");
        p.save(&path).unwrap();
        assert_eq!(PolicyParameters::load(&path).unwrap(), p);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let p = random_policy(1, &[3, 2]);
        let good = p.to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(PolicyParameters::from_bytes(&bad), Err(PolicyError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(PolicyParameters::from_bytes(&bad), Err(PolicyError::Version(2))));
        assert!(matches!(PolicyParameters::from_bytes(&good[..good.len() - 6]), Err(PolicyError::Truncated(_))));
        let mut bad = good.clone();
        bad[30] ^= 1;
        assert!(matches!(PolicyParameters::from_bytes(&bad), Err(PolicyError::Checksum { .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(PolicyParameters::from_bytes(&bad), Err(PolicyError::Trailing(1))));
    }

    #[test]
    fn saturated_inputs_stay_finite() {
        let mut p = random_policy(2, &DEFAULT_LAYER_SIZES);
        for w in p.layers.iter_mut().flat_map(|l| l.weights.iter_mut()) {
            *w *= 50.0;
        }
        for corner in [1.0, -1.0] {
            let d = p.forward(&[corner; 54]).unwrap();
            assert!(d.mean.iter().all(|m| m.is_finite()));
        }
    }

    proptest! {
        #[test]
        fn forward_is_deterministic(seed in 0u64..1000, x in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let p = random_policy(seed, &[6, 5, 2]);
            prop_assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
        }

        #[test]
        fn flat_round_trip(seed in 0u64..1000) {
            let p = random_policy(seed, &[4, 3, 2]);
            prop_assert_eq!(p.with_flat(&p.to_flat()).unwrap(), p);
        }
    }
}
