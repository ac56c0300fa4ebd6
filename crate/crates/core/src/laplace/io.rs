//! Binary posterior files: a magic line, a JSON header line, then the MAP weights and
//! `S` (column-major) as little-endian `f64`.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::PosteriorFactors;
use crate::error::{Error, Result};
use crate::nn::{expect_magic, read_f64s, read_json_line, write_f64s, MlpSpec, ParamVector};
use crate::points::Points;

const POSTERIOR_MAGIC: &str = "fsp-laplace-posterior v1";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: MlpSpec,
    num_params: usize,
    rank: usize,
    truncation: usize,
    projected_rank: usize,
    eigenvalues: Vec<f64>,
    context: Points,
}

pub fn write_posterior<W: Write>(mut out: W, posterior: &PosteriorFactors) -> Result<()> {
    let header = Header {
        spec: posterior.spec.clone(),
        num_params: posterior.map.len(),
        rank: posterior.rank(),
        truncation: posterior.truncation,
        projected_rank: posterior.projected_rank,
        eigenvalues: posterior.eigenvalues.clone(),
        context: posterior.context.clone(),
    };
    writeln!(out, "{POSTERIOR_MAGIC}")?;
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    write_f64s(&mut out, posterior.map.as_slice())?;
    write_f64s(&mut out, posterior.s.as_slice())?;
    Ok(())
}

pub fn read_posterior<R: BufRead>(mut input: R) -> Result<PosteriorFactors> {
    expect_magic(&mut input, POSTERIOR_MAGIC)?;
    let h: Header = read_json_line(&mut input)?;
    let spec = MlpSpec::new(h.spec.layer_widths().to_vec(), h.spec.activation()).map_err(|e| Error::Format(e.to_string()))?;
    if h.num_params != spec.num_params() {
        return Err(Error::Format("parameter count disagrees with the architecture".into()));
    }
    if h.eigenvalues.len() != h.rank || h.truncation + h.rank != h.projected_rank {
        return Err(Error::Format("inconsistent rank bookkeeping in posterior header".into()));
    }
    let map = read_f64s(&mut input, h.num_params)?;
    let s = read_f64s(&mut input, h.num_params * h.rank)?;
    Ok(PosteriorFactors {
        spec,
        map: ParamVector::from_vec(map),
        s: DMatrix::from_vec(h.num_params, h.rank, s),
        eigenvalues: h.eigenvalues,
        truncation: h.truncation,
        projected_rank: h.projected_rank,
        context: h.context,
    })
}
