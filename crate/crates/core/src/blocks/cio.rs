use std::collections::BTreeSet;

use crate::error::{config_err, Result};

use super::graph::ModelGraph;
use super::LayerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CioKind {
    Dense,
    PartialDense,
}

/// An exact CIO value, stored in units of one half.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cio {
    pub halves: u64,
}

impl Cio {
    /// Integer report value, rounded up.
    pub fn ceil(self) -> u64 {
        self.halves.div_ceil(2)
    }

    pub fn as_f64(self) -> f64 {
        self.halves as f64 / 2.0
    }
}

/// Memory-traffic proxy of a dense block with `c` input channels, `m` dense
/// layers and growth rate `d`:
/// dense `c·m + (m²+m)·d/2`, partial dense `(c·m + (m²+m)·d)/2`.
pub fn cio(kind: CioKind, c: i64, m: i64, d: i64) -> Result<Cio> {
    if c < 1 || m < 1 || d < 0 {
        return Err(config_err!("cio needs c >= 1, m >= 1, d >= 0 (got c={c}, m={m}, d={d})"));
    }
    let (c, m, d) = (c as u64, m as u64, d as u64);
    let tri = (m * m + m) * d;
    let halves = match kind {
        CioKind::Dense => 2 * c * m + tri,
        CioKind::PartialDense => c * m + tri,
    };
    Ok(Cio { halves })
}

/// Pooling geometry for `n` bins over an axis of length `h_in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SppParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub padded: usize,
    /// More bins than input cells.
    pub degenerate: bool,
}

pub fn spp_params(h_in: usize, n: usize) -> Result<SppParams> {
    if h_in == 0 || n == 0 {
        return Err(config_err!("spp_params needs h_in >= 1 and n >= 1 (got {h_in}, {n})"));
    }
    let kernel = h_in.div_ceil(n);
    let padding = (kernel * n - h_in + 1) / 2;
    Ok(SppParams {
        kernel,
        stride: kernel,
        padding,
        padded: 2 * padding + h_in,
        degenerate: n > h_in,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CioRow {
    pub block: String,
    pub c: usize,
    pub m: usize,
    pub d: usize,
    pub dense: Cio,
    pub partial: Cio,
}

impl CioRow {
    /// Fraction of dense CIO saved by the partial block.
    pub fn saving(&self) -> f64 {
        1.0 - self.partial.as_f64() / self.dense.as_f64()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CioReport {
    pub rows: Vec<CioRow>,
    pub total_dense: Cio,
    pub total_partial: Cio,
}

impl CioReport {
    pub fn from_rows(rows: Vec<CioRow>) -> Self {
        let total_dense = Cio {
            halves: rows.iter().map(|r| r.dense.halves).sum(),
        };
        let total_partial = Cio {
            halves: rows.iter().map(|r| r.partial.halves).sum(),
        };
        CioReport {
            rows,
            total_dense,
            total_partial,
        }
    }
}

/// One row per distinct CSPDense block (shared unrolled copies count once),
/// with `c` the block's input channel count.
pub fn analyze_cio(graph: &ModelGraph) -> Result<CioReport> {
    let channels = graph.channels()?;
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for node in graph.nodes() {
        if let LayerSpec::CspDense { layers, growth, .. } = node.spec {
            if !seen.insert(node.param_key.clone()) {
                continue;
            }
            let c = channels[node.inputs[0]];
            rows.push(CioRow {
                block: node.param_key.clone(),
                c,
                m: layers,
                d: growth,
                dense: cio(CioKind::Dense, c as i64, layers as i64, growth as i64)?,
                partial: cio(CioKind::PartialDense, c as i64, layers as i64, growth as i64)?,
            });
        }
    }
    Ok(CioReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cio_examples() {
        let dense = cio(CioKind::Dense, 64, 4, 32).unwrap();
        let partial = cio(CioKind::PartialDense, 64, 4, 32).unwrap();
        assert_eq!((dense.ceil(), partial.ceil()), (576, 448));
        assert_eq!(cio(CioKind::Dense, 10, 1, 2).unwrap().ceil(), 12);
        assert_eq!(cio(CioKind::PartialDense, 10, 1, 2).unwrap().ceil(), 7);
        let row = CioRow {
            block: "b".into(),
            c: 64,
            m: 4,
            d: 32,
            dense,
            partial,
        };
        assert!((row.saving() - 128.0 / 576.0).abs() < 1e-15);
    }

    #[test]
    fn half_integral_partial_rounds_up() {
        let p = cio(CioKind::PartialDense, 3, 1, 0).unwrap();
        assert_eq!(p.halves, 3);
        assert_eq!(p.ceil(), 2);
    }

    #[test]
    fn zero_growth_halves_exactly() {
        for c in 1..=64 {
            for m in 1..=8 {
                let dense = cio(CioKind::Dense, c, m, 0).unwrap();
                let partial = cio(CioKind::PartialDense, c, m, 0).unwrap();
                assert_eq!(partial.halves * 2, dense.halves);
            }
        }
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(cio(CioKind::Dense, -1, 1, 0).is_err());
        assert!(cio(CioKind::Dense, 1, 0, 0).is_err());
        assert!(cio(CioKind::PartialDense, 1, 1, -3).is_err());
    }

    #[test]
    fn spp_param_examples() {
        let p = spp_params(13, 1).unwrap();
        assert_eq!((p.kernel, p.stride, p.padding, p.padded), (13, 13, 0, 13));
        let p = spp_params(13, 2).unwrap();
        assert_eq!((p.kernel, p.stride, p.padding, p.padded), (7, 7, 1, 15));
        let p = spp_params(9, 9).unwrap();
        assert_eq!((p.kernel, p.stride, p.padding, p.padded), (1, 1, 0, 9));
        assert!(spp_params(3, 4).unwrap().degenerate);
        assert!(!spp_params(4, 4).unwrap().degenerate);
    }
}
