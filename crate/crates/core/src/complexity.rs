//! Analytic multiply-accumulate and parameter counts.
//!
//! Convolutions and dense layers count one MAC per weight tap per output
//! element; BatchNorm counts two per element; activations, pooling and
//! upsampling count one per output element. Residual additions and the
//! excitation rescale are elementwise merges, not layers, and are not
//! counted.

use std::fmt::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::ModelGraph;

pub const CONVENTION: &str = "per-layer-hooks: conv=k2*cin*cout*out(+bias), dense=in*out, bn=2/elem, act/pool=1/elem, gdn=c2*hw+2*c*hw";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacRow {
    pub name: String,
    pub out_shape: Vec<usize>,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacReport {
    pub rows: Vec<MacRow>,
    pub total_macs: u64,
    pub total_params: u64,
    pub convention: String,
}

/// MACs and trainable parameters of one layer given its per-sample output
/// shape.
pub fn count_layer(spec: &LayerSpec, out_shape: &[usize]) -> Result<(u64, u64)> {
    if out_shape.is_empty() || out_shape.contains(&0) {
        return Err(Error::invalid(format!("{spec}: unresolved output shape {out_shape:?}")));
    }
    let elems: u64 = out_shape.iter().map(|&d| d as u64).product();
    let spatial = |c: usize| -> Result<u64> {
        if out_shape.len() != 3 || out_shape[0] != c {
            return Err(Error::shape(spec.kind_name(), &[c, 0, 0], out_shape));
        }
        Ok((out_shape[1] * out_shape[2]) as u64)
    };
    let params = spec.trainable_count() as u64;
    let macs = match *spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        }
        | LayerSpec::TransConv2d {
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        } => {
            let hw = spatial(out_ch)?;
            let k2 = (kernel * kernel) as u64;
            k2 * in_ch as u64 * out_ch as u64 * hw + if bias { out_ch as u64 * hw } else { 0 }
        }
        LayerSpec::Dense { inp, out, .. } => {
            if out_shape != [out] {
                return Err(Error::shape("Dense", &[out], out_shape));
            }
            (inp * out) as u64
        }
        LayerSpec::BatchNorm { .. } => 2 * elems,
        LayerSpec::Gdn { ch } | LayerSpec::Igdn { ch } => {
            let hw = spatial(ch)?;
            let c = ch as u64;
            c * c * hw + 2 * c * hw
        }
        LayerSpec::ReLU
        | LayerSpec::PReLU { .. }
        | LayerSpec::Sigmoid
        | LayerSpec::GlobalAvgPool
        | LayerSpec::AvgPool { .. }
        | LayerSpec::UpsampleNearest { .. } => elems,
    };
    Ok((macs, params))
}

impl MacReport {
    fn from_rows(rows: Vec<MacRow>) -> Self {
        Self {
            total_macs: rows.iter().map(|r| r.macs).sum(),
            total_params: rows.iter().map(|r| r.params).sum(),
            rows,
            convention: CONVENTION.to_string(),
        }
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    /// Concatenation of two reports.
    pub fn concat(mut self, other: MacReport) -> Self {
        self.rows.extend(other.rows);
        Self::from_rows(self.rows)
    }

    /// `layer,out_shape,macs,params` rows followed by a totals row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,out_shape,macs,params\n");
        for r in &self.rows {
            let shape: Vec<String> = r.out_shape.iter().map(usize::to_string).collect();
            writeln!(s, "{},{},{},{}", r.name, shape.join("x"), r.macs, r.params).unwrap();
        }
        writeln!(s, "TOTAL,,{},{}", self.total_macs, self.total_params).unwrap();
        s
    }

    pub fn totals_line(&self) -> String {
        format!(
            "total_macs={} gmacs={:.4} params={} mparams={:.4} convention={}",
            self.total_macs,
            self.gmacs(),
            self.total_params,
            self.mparams(),
            self.convention
        )
    }
}

pub fn count_graph(graph: &ModelGraph) -> Result<MacReport> {
    let rows = graph
        .sites()?
        .into_iter()
        .map(|site| {
            let (macs, params) = count_layer(&site.spec, &site.output)?;
            Ok(MacRow {
                name: site.name,
                out_shape: site.output,
                macs,
                params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MacReport::from_rows(rows))
}

/// On-device cost: the front part followed by the encoder.
pub fn count_ondevice(front: &ModelGraph, encoder: Option<&ModelGraph>, input_shape: &[usize]) -> Result<MacReport> {
    if front.input_shape != input_shape {
        return Err(Error::shape("on-device input", input_shape, &front.input_shape));
    }
    let mut report = count_graph(front)?;
    if let Some(enc) = encoder {
        let mid = front.output_shape()?;
        if enc.input_shape != mid {
            return Err(Error::shape("encoder input", &mid, &enc.input_shape));
        }
        report = report.concat(count_graph(enc)?);
    }
    Ok(report)
}
