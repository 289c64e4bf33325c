use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            // v = 0 takes the positive branch.
            Activation::LeakyRelu(slope) => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::Identity => v,
        }
    }

    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if v >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape and composition of one dense layer:
/// linear → (layer norm) → (FiLM) → activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub has_layernorm: bool,
    pub has_film: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_width == 0 || self.out_width == 0 {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {}→{}",
                self.in_width, self.out_width
            )));
        }
        if let Activation::LeakyRelu(slope) = self.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!("leaky slope {slope} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// A single set of FiLM coefficients, broadcast over rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FilmParams {
    pub fn identity(width: usize) -> Self {
        FilmParams {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
        }
    }
}

/// Per-row FiLM coefficients: row `i` modulates row `i` of the activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    pub gamma: Tensor2,
    pub beta: Tensor2,
}

/// `input · weightᵀ + bias`, with `weight` stored as `out × in`.
pub fn linear_forward(weight: &Tensor2, bias: &[f64], input: &Tensor2) -> Result<Tensor2> {
    if input.cols() != weight.cols() || bias.len() != weight.rows() {
        return Err(Error::dim(
            "linear_forward",
            format!(
                "input ?x{} and bias {} for weight {}x{}",
                weight.cols(),
                weight.rows(),
                weight.rows(),
                weight.cols()
            ),
            format!("input {}x{}, bias {}", input.rows(), input.cols(), bias.len()),
        ));
    }
    let mut out = input.matmul_nt(weight)?;
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Pre-affine normalized activations.
    pub normalized: Tensor2,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layernorm_forward(
    input: &Tensor2,
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<(Tensor2, LayerNormCache)> {
    let width = input.cols();
    if gain.len() != width || shift.len() != width {
        return Err(Error::dim(
            "layernorm_forward",
            format!("gain/shift of length {width}"),
            format!("gain {}, shift {}", gain.len(), shift.len()),
        ));
    }
    input.ensure_finite("layernorm input")?;
    let rows = input.rows();
    let mut normalized = Tensor2::zeros(rows, width);
    let mut out = Tensor2::zeros(rows, width);
    let mut mean = Vec::with_capacity(rows);
    let mut variance = Vec::with_capacity(rows);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let x = input.row(i);
        let m = x.iter().sum::<f64>() / width as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + eps).sqrt();
        let n = normalized.row_mut(i);
        for (nj, xj) in n.iter_mut().zip(x) {
            *nj = (xj - m) * is;
        }
        let o = out.row_mut(i);
        for j in 0..width {
            o[j] = normalized.get(i, j) * gain[j] + shift[j];
        }
        mean.push(m);
        variance.push(var);
        inv_std.push(is);
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            mean,
            variance,
            inv_std,
        },
    ))
}

pub fn film_forward(input: &Tensor2, film: &FilmParams) -> Result<Tensor2> {
    if film.gamma.len() != input.cols() || film.beta.len() != input.cols() {
        return Err(Error::dim(
            "film_forward",
            format!("gamma/beta of width {}", input.cols()),
            format!("gamma {}, beta {}", film.gamma.len(), film.beta.len()),
        ));
    }
    let mut out = input.clone();
    for i in 0..out.rows() {
        for ((o, g), b) in out.row_mut(i).iter_mut().zip(&film.gamma).zip(&film.beta) {
            *o = g * *o + b;
        }
    }
    Ok(out)
}

pub fn film_forward_rows(input: &Tensor2, film: &Modulation) -> Result<Tensor2> {
    if film.gamma.shape() != input.shape() || film.beta.shape() != input.shape() {
        return Err(Error::dim(
            "film_forward_rows",
            format!("gamma/beta of shape {:?}", input.shape()),
            format!("gamma {:?}, beta {:?}", film.gamma.shape(), film.beta.shape()),
        ));
    }
    let mut out = input.clone();
    let (g, b) = (film.gamma.data(), film.beta.data());
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        *o = g[k] * *o + b[k];
    }
    Ok(out)
}

/// Glorot-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub spec: LayerSpec,
    /// `out_width × in_width`.
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    /// Layer-norm gain and shift; empty when the layer has no layer norm.
    pub ln_gain: Vec<f64>,
    pub ln_shift: Vec<f64>,
    pub ln_eps: f64,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Tensor2,
    ln: Option<LayerNormCache>,
    /// Output of linear (+ layer norm), before FiLM.
    pre_film: Tensor2,
    /// Input of the activation.
    pre_act: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_shift: Vec<f64>,
}

impl DenseGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.weight.data(), &self.bias];
        if !self.ln_gain.is_empty() {
            out.push(&self.ln_gain);
            out.push(&self.ln_shift);
        }
        out
    }
}

impl DenseLayer {
    /// Glorot-uniform weights, zero biases, unit layer-norm gain.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let bound = glorot_bound(spec.in_width, spec.out_width);
        let data = (0..spec.in_width * spec.out_width)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let (ln_gain, ln_shift) = if spec.has_layernorm {
            (vec![1.0; spec.out_width], vec![0.0; spec.out_width])
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(DenseLayer {
            spec,
            weight: Tensor2::from_vec(spec.out_width, spec.in_width, data)?,
            bias: vec![0.0; spec.out_width],
            ln_gain,
            ln_shift,
            ln_eps: LAYERNORM_EPS,
        })
    }

    pub fn forward(&self, input: &Tensor2, film: Option<&Modulation>) -> Result<(Tensor2, DenseCache)> {
        let z = linear_forward(&self.weight, &self.bias, input)?;
        let (pre_film, ln) = if self.spec.has_layernorm {
            let (out, cache) = layernorm_forward(&z, &self.ln_gain, &self.ln_shift, self.ln_eps)?;
            (out, Some(cache))
        } else {
            (z, None)
        };
        let pre_act = match (self.spec.has_film, film) {
            (true, Some(m)) => film_forward_rows(&pre_film, m)?,
            (false, None) => pre_film.clone(),
            (true, None) => {
                return Err(Error::Contract("FiLM layer called without modulation".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Contract("modulation passed to a layer without FiLM".into()))
            }
        };
        let mut out = pre_act.clone();
        let act = self.spec.activation;
        for v in out.data_mut() {
            *v = act.apply(*v);
        }
        Ok((
            out,
            DenseCache {
                input: input.clone(),
                ln,
                pre_film,
                pre_act,
            },
        ))
    }

    /// Reverse-mode pass. Returns parameter gradients, FiLM coefficient
    /// gradients (when modulated), and the gradient w.r.t. the layer input.
    pub fn backward(
        &self,
        cache: &DenseCache,
        upstream: &Tensor2,
        film: Option<&Modulation>,
    ) -> Result<(DenseGrads, Option<Modulation>, Tensor2)> {
        if upstream.shape() != cache.pre_act.shape() || cache.input.cols() != self.spec.in_width {
            return Err(Error::Contract(format!(
                "cache/upstream shape {:?} does not match layer {}→{}",
                upstream.shape(),
                self.spec.in_width,
                self.spec.out_width
            )));
        }
        let act = self.spec.activation;
        let mut dv = upstream.clone();
        for (d, v) in dv.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *d *= act.derivative(*v);
        }

        let (du, film_grad) = match (self.spec.has_film, film) {
            (true, Some(m)) => {
                let mut dgamma = dv.clone();
                for (g, u) in dgamma.data_mut().iter_mut().zip(cache.pre_film.data()) {
                    *g *= u;
                }
                let mut du = dv.clone();
                for (d, g) in du.data_mut().iter_mut().zip(m.gamma.data()) {
                    *d *= g;
                }
                (
                    du,
                    Some(Modulation {
                        gamma: dgamma,
                        beta: dv,
                    }),
                )
            }
            (false, None) => (dv, None),
            _ => return Err(Error::Contract("FiLM modulation does not match layer spec".into())),
        };

        let (dz, ln_gain, ln_shift) = match &cache.ln {
            Some(ln) => {
                let width = du.cols();
                let mut dgain = vec![0.0; width];
                let mut dshift = vec![0.0; width];
                let mut dz = Tensor2::zeros(du.rows(), width);
                let mut dn = vec![0.0; width];
                for i in 0..du.rows() {
                    let dui = du.row(i);
                    let ni = ln.normalized.row(i);
                    for j in 0..width {
                        dgain[j] += dui[j] * ni[j];
                        dshift[j] += dui[j];
                        dn[j] = dui[j] * self.ln_gain[j];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / width as f64;
                    let mean_dn_n = dn.iter().zip(ni).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    let is = ln.inv_std[i];
                    for (j, d) in dz.row_mut(i).iter_mut().enumerate() {
                        *d = is * (dn[j] - mean_dn - ni[j] * mean_dn_n);
                    }
                }
                (dz, dgain, dshift)
            }
            None => (du, Vec::new(), Vec::new()),
        };

        let weight = dz.matmul_tn(&cache.input)?;
        let bias = dz.sum_rows();
        let dinput = dz.matmul_nn(&self.weight)?;
        Ok((
            DenseGrads {
                weight,
                bias,
                ln_gain,
                ln_shift,
            },
            film_grad,
            dinput,
        ))
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.weight.data(), &self.bias];
        if self.spec.has_layernorm {
            out.push(&self.ln_gain);
            out.push(&self.ln_shift);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.weight.data_mut(), &mut self.bias];
        if self.spec.has_layernorm {
            out.push(&mut self.ln_gain);
            out.push(&mut self.ln_shift);
        }
        out
    }
}

/// A stack of dense layers evaluated in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    layers: Vec<DenseCache>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrads>,
    /// FiLM coefficient gradients, one entry per layer.
    pub film: Vec<Option<Modulation>>,
    pub input: Tensor2,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        for pair in specs.windows(2) {
            if pair[0].out_width != pair[1].in_width {
                return Err(Error::Config(format!(
                    "layer widths do not chain: {} then {}",
                    pair[0].out_width, pair[1].in_width
                )));
            }
        }
        let layers = specs
            .iter()
            .map(|s| DenseLayer::init(*s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_width)
    }

    pub fn forward(&self, input: &Tensor2, films: &[Option<&Modulation>]) -> Result<(Tensor2, MlpCache)> {
        if films.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} modulation slots for {} layers",
                films.len(),
                self.layers.len()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (layer, film) in self.layers.iter().zip(films) {
            let (out, cache) = layer.forward(&x, *film)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, MlpCache { layers: caches }))
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &Tensor2,
        films: &[Option<&Modulation>],
    ) -> Result<MlpGrads> {
        if cache.layers.len() != self.layers.len() || films.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "stack of {} layers given {} caches and {} modulation slots",
                self.layers.len(),
                cache.layers.len(),
                films.len()
            )));
        }
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut film_grads = Vec::with_capacity(n);
        let mut d = upstream.clone();
        for idx in (0..n).rev() {
            let (g, fg, dx) = self.layers[idx].backward(&cache.layers[idx], &d, films[idx])?;
            grads.push(g);
            film_grads.push(fg);
            d = dx;
        }
        grads.reverse();
        film_grads.reverse();
        Ok(MlpGrads {
            layers: grads,
            film: film_grads,
            input: d,
        })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|g| g.slices()).collect()
    }
}
