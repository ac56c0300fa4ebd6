//! Multilayer perceptrons with exact Jacobian-vector and vector-Jacobian products.
//!
//! All weights live in one flat [`ParamVector`]. Layers are stored in order; within a
//! layer the weight matrix comes first in row-major order (`W[out][in]`) followed by the
//! bias. Every curvature object in the crate indexes into this layout, so checkpoints
//! written by [`write_checkpoint`] are portable between runs.
//!
//! Hidden layers apply the activation, the output layer is affine.

use std::io::{BufRead, Read, Write};
use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

/// Default cap on the number of entries a dense Jacobian may hold.
pub const DEFAULT_JACOBIAN_CAP: usize = 50_000_000;

/// Points per parallel work unit in accumulated products. Fixed so that the
/// summation order, and thus every bit of the result, is independent of the thread count.
pub(crate) const VJP_CHUNK: usize = 8;

/// Sums equally long buffers in slice order.
pub(crate) fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for part in parts {
        for (a, b) in out.iter_mut().zip(part) {
            *a += b;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `a = act(z)`.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a fully connected network: `[input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

/// Flat vector of all network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(DVector<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(DVector::zeros(len))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(DVector::from_vec(values))
    }

    pub fn from_dvector(values: DVector<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }
}

/// Dense Jacobian of the stacked outputs of a batch, rows ordered `(input, output)`.
#[derive(Debug, Clone)]
pub struct JacobianBlock {
    pub matrix: DMatrix<f64>,
}

/// Activations recorded by a forward pass through a single input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input, the last entry is the network output.
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least one layer")
    }
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::shape("an MLP needs at least input and output widths"));
        }
        if layer_widths.contains(&0) {
            return Err(Error::shape("layer widths must be positive"));
        }
        Ok(MlpSpec {
            layer_widths,
            activation,
        })
    }

    /// `input -> hidden... -> output` network with tanh hidden units.
    pub fn tanh(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        MlpSpec::new(widths, Activation::Tanh)
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect()
    }

    /// Scaled uniform initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.num_params()];
        for slot in self.slots() {
            let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut params[slot.weights..slot.bias] {
                *w = rng.random_range(-bound..bound);
            }
        }
        ParamVector::from_vec(params)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!(
                "parameter vector has length {}, architecture needs {}",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input of dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass through one input, keeping every activation.
    pub fn trace(&self, params: &ParamVector, x: &[f64]) -> Result<ForwardTrace> {
        self.check_params(params)?;
        self.check_input(x)?;
        Ok(self.trace_unchecked(params.as_slice(), x))
    }

    fn trace_unchecked(&self, p: &[f64], x: &[f64]) -> ForwardTrace {
        let slots = self.slots();
        let last = slots.len() - 1;
        let mut activations = Vec::with_capacity(slots.len() + 1);
        activations.push(x.to_vec());
        for (l, slot) in slots.iter().enumerate() {
            let prev = &activations[l];
            let mut out = vec![0.0; slot.fan_out];
            for (o, value) in out.iter_mut().enumerate() {
                let row = &p[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                let z = p[slot.bias + o] + dot(row, prev);
                *value = if l == last { z } else { self.activation.apply(z) };
            }
            activations.push(out);
        }
        ForwardTrace { activations }
    }

    /// Network outputs for every row of `inputs`, as an `n x O` matrix.
    pub fn forward(&self, params: &ParamVector, inputs: &Points) -> Result<DMatrix<f64>> {
        self.check_params(params)?;
        if !inputs.is_empty() && inputs.dim() != self.input_dim() {
            return Err(Error::shape(format!(
                "inputs of dimension {}, network expects {}",
                inputs.dim(),
                self.input_dim()
            )));
        }
        let o = self.output_dim();
        let mut out = DMatrix::zeros(inputs.len(), o);
        for (i, x) in inputs.rows().enumerate() {
            let trace = self.trace_unchecked(params.as_slice(), x);
            for (k, v) in trace.output().iter().enumerate() {
                out[(i, k)] = *v;
            }
        }
        Ok(out)
    }

    /// Output of the network at a single point.
    pub fn forward_point(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(params, x)?.output().to_vec())
    }

    /// `J^T u` for the Jacobian at `x`.
    pub fn vjp(&self, params: &ParamVector, x: &[f64], cotangent: &[f64]) -> Result<ParamVector> {
        let trace = self.trace(params, x)?;
        let mut grad = vec![0.0; self.num_params()];
        self.vjp_traced(params, &trace, cotangent, &mut grad)?;
        Ok(ParamVector::from_vec(grad))
    }

    /// Accumulates `J^T u` into `grad` for a recorded forward pass.
    pub fn vjp_traced(
        &self,
        params: &ParamVector,
        trace: &ForwardTrace,
        cotangent: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "cotangent of length {}, network has {} outputs",
                cotangent.len(),
                self.output_dim()
            )));
        }
        if grad.len() != self.num_params() {
            return Err(Error::shape("gradient buffer has the wrong length"));
        }
        let p = params.as_slice();
        let slots = self.slots();
        let mut delta = cotangent.to_vec();
        for (l, slot) in slots.iter().enumerate().rev() {
            let prev = &trace.activations[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += d * a;
                }
                grad[slot.bias + o] += d;
            }
            if l == 0 {
                break;
            }
            let mut back = vec![0.0; slot.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &p[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += w * d;
                }
            }
            for (b, a) in back.iter_mut().zip(prev) {
                *b *= self.activation.slope_from_output(*a);
            }
            delta = back;
        }
        Ok(())
    }

    /// `J v` for the Jacobian at `x`.
    pub fn jvp(&self, params: &ParamVector, x: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(params, x)?;
        self.jvp_traced(params, &trace, tangent)
    }

    /// Forward-mode product along `tangent` for a recorded forward pass.
    pub fn jvp_traced(&self, params: &ParamVector, trace: &ForwardTrace, tangent: &[f64]) -> Result<Vec<f64>> {
        if tangent.len() != self.num_params() {
            return Err(Error::shape(format!(
                "tangent of length {}, network has {} parameters",
                tangent.len(),
                self.num_params()
            )));
        }
        let p = params.as_slice();
        let slots = self.slots();
        let last = slots.len() - 1;
        let mut dot_prev = vec![0.0; self.input_dim()];
        for (l, slot) in slots.iter().enumerate() {
            let prev = &trace.activations[l];
            let next = &trace.activations[l + 1];
            let mut dz = vec![0.0; slot.fan_out];
            for (o, value) in dz.iter_mut().enumerate() {
                let range = slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in;
                let mut acc = tangent[slot.bias + o] + dot(&tangent[range.clone()], prev);
                if l > 0 {
                    acc += dot(&p[range], &dot_prev);
                }
                *value = if l == last {
                    acc
                } else {
                    acc * self.activation.slope_from_output(next[o])
                };
            }
            dot_prev = dz;
        }
        Ok(dot_prev)
    }

    /// `J(x) T` for every column of `tangents` (`P x k`), returned as `O x k`.
    pub fn jvp_columns(&self, params: &ParamVector, x: &[f64], tangents: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let trace = self.trace(params, x)?;
        self.jvp_columns_traced(params, &trace, tangents)
    }

    pub fn jvp_columns_traced(
        &self,
        params: &ParamVector,
        trace: &ForwardTrace,
        tangents: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if tangents.nrows() != self.num_params() {
            return Err(Error::shape("tangent matrix row count differs from parameter count"));
        }
        let o = self.output_dim();
        let columns: Result<Vec<Vec<f64>>> = (0..tangents.ncols())
            .into_par_iter()
            .map(|j| self.jvp_traced(params, trace, tangents.column(j).as_slice()))
            .collect();
        let columns = columns?;
        let mut out = DMatrix::zeros(o, tangents.ncols());
        for (j, col) in columns.iter().enumerate() {
            out.column_mut(j).copy_from_slice(col);
        }
        Ok(out)
    }

    /// Stacked `J(X) v` for all rows of `inputs`, ordered `(input, output)`.
    pub fn stacked_jvp(&self, params: &ParamVector, inputs: &Points, tangent: &[f64]) -> Result<DVector<f64>> {
        let o = self.output_dim();
        let per_point: Result<Vec<Vec<f64>>> = (0..inputs.len())
            .into_par_iter()
            .map(|i| self.jvp(params, inputs.row(i), tangent))
            .collect();
        let mut out = DVector::zeros(inputs.len() * o);
        for (i, v) in per_point?.into_iter().enumerate() {
            out.rows_mut(i * o, o).copy_from_slice(&v);
        }
        Ok(out)
    }

    /// `J(X)^T u` for a stacked cotangent ordered `(input, output)`.
    pub fn stacked_vjp(&self, params: &ParamVector, inputs: &Points, cotangent: &[f64]) -> Result<ParamVector> {
        let o = self.output_dim();
        if cotangent.len() != inputs.len() * o {
            return Err(Error::shape("stacked cotangent length differs from n * O"));
        }
        let n = inputs.len();
        let partials: Result<Vec<Vec<f64>>> = (0..n.div_ceil(VJP_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; self.num_params()];
                for i in c * VJP_CHUNK..((c + 1) * VJP_CHUNK).min(n) {
                    let trace = self.trace(params, inputs.row(i))?;
                    self.vjp_traced(params, &trace, &cotangent[i * o..(i + 1) * o], &mut acc)?;
                }
                Ok(acc)
            })
            .collect();
        Ok(ParamVector::from_vec(sum_in_order(partials?, self.num_params())))
    }

    /// Dense Jacobian of the stacked outputs. Refuses when `n * O * P` exceeds `cap`.
    pub fn jacobian_capped(&self, params: &ParamVector, inputs: &Points, cap: usize) -> Result<JacobianBlock> {
        self.check_params(params)?;
        let o = self.output_dim();
        let p = self.num_params();
        let requested = inputs.len() * o * p;
        if requested > cap {
            return Err(Error::CapExceeded {
                what: "dense Jacobian",
                requested,
                cap,
            });
        }
        let rows: Result<Vec<Vec<Vec<f64>>>> = (0..inputs.len())
            .into_par_iter()
            .map(|i| {
                let trace = self.trace(params, inputs.row(i))?;
                (0..o)
                    .map(|k| {
                        let mut e = vec![0.0; o];
                        e[k] = 1.0;
                        let mut g = vec![0.0; p];
                        self.vjp_traced(params, &trace, &e, &mut g)?;
                        Ok(g)
                    })
                    .collect()
            })
            .collect();
        let mut matrix = DMatrix::zeros(inputs.len() * o, p);
        for (i, block) in rows?.into_iter().enumerate() {
            for (k, g) in block.into_iter().enumerate() {
                for (j, v) in g.into_iter().enumerate() {
                    matrix[(i * o + k, j)] = v;
                }
            }
        }
        Ok(JacobianBlock { matrix })
    }

    pub fn jacobian(&self, params: &ParamVector, inputs: &Points) -> Result<JacobianBlock> {
        self.jacobian_capped(params, inputs, DEFAULT_JACOBIAN_CAP)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const CHECKPOINT_MAGIC: &str = "fsp-laplace-checkpoint v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: MlpSpec,
    num_params: usize,
}

/// Writes a text header line with the architecture followed by the parameters as
/// little-endian `f64`.
pub fn write_checkpoint<W: Write>(mut out: W, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.num_params() {
        return Err(Error::shape("checkpoint parameters do not match the architecture"));
    }
    let header = CheckpointHeader {
        spec: spec.clone(),
        num_params: params.len(),
    };
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    write_f64s(&mut out, params.as_slice())?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(MlpSpec, ParamVector)> {
    expect_magic(&mut input, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = read_json_line(&mut input)?;
    let spec = MlpSpec::new(header.spec.layer_widths.clone(), header.spec.activation)
        .map_err(|e| Error::Format(e.to_string()))?;
    if header.num_params != spec.num_params() {
        return Err(Error::Format("parameter count disagrees with the architecture".into()));
    }
    let values = read_f64s(&mut input, header.num_params)?;
    Ok((spec, ParamVector::from_vec(values)))
}

pub(crate) fn expect_magic<R: BufRead>(input: &mut R, magic: &str) -> Result<()> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != magic {
        return Err(Error::Format(format!("expected header `{magic}`")));
    }
    Ok(())
}

pub(crate) fn read_json_line<R: BufRead, T: serde::de::DeserializeOwned>(input: &mut R) -> Result<T> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("expected {count} little-endian f64 values")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
