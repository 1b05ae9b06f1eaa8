//! Fusion of aligned feature grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{Canvas, FeatureGrid};
use crate::nn::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("no grids to aggregate")]
    Empty,
    #[error("{grids} grids but {placements} placements")]
    CanvasMismatch { grids: usize, placements: usize },
    #[error("channel selection must be non-empty")]
    EmptySelection,
    #[error("channel {channel} out of range for C={c}")]
    ChannelOutOfRange { channel: usize, c: usize },
    #[error("channel {0} selected twice")]
    DuplicateChannel(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Sum,
    MaxOut,
    MaxNorm,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 3] = [
        AggregationMode::Sum,
        AggregationMode::MaxOut,
        AggregationMode::MaxNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::Sum => "sum",
            AggregationMode::MaxOut => "maxout",
            AggregationMode::MaxNorm => "maxnorm",
        }
    }
}

const NONE: u32 = u32::MAX;

/// Which input supplied each output value, for routing gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum Routes {
    Sum,
    /// Grid index per canvas cell and channel.
    MaxOut(Vec<u32>),
    /// Grid index per canvas cell.
    MaxNorm(Vec<u32>),
}

/// Grid indices in ascending source id, ties by position.
fn source_order(grids: &[FeatureGrid]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grids.len()).collect();
    order.sort_by_key(|&i| (grids[i].source, i));
    order
}

/// Fuses the grids on `canvas`. Cells no grid covers are zero; elsewhere
/// only the grids present at a cell take part.
pub fn aggregate(
    grids: &[FeatureGrid],
    canvas: &Canvas,
    mode: AggregationMode,
) -> Result<FeatureGrid, AggregateError> {
    aggregate_with_routes(grids, canvas, mode).map(|(g, _)| g)
}

pub fn aggregate_with_routes(
    grids: &[FeatureGrid],
    canvas: &Canvas,
    mode: AggregationMode,
) -> Result<(FeatureGrid, Routes), AggregateError> {
    if grids.is_empty() {
        return Err(AggregateError::Empty);
    }
    if grids.len() != canvas.placements.len() {
        return Err(AggregateError::CanvasMismatch {
            grids: grids.len(),
            placements: canvas.placements.len(),
        });
    }
    let (h, w, c) = (
        canvas.extent.height(),
        canvas.extent.width(),
        canvas.channels,
    );
    let mut out = Tensor::zeros(h, w, c);
    let order = source_order(grids);
    let routes = match mode {
        AggregationMode::Sum => {
            for &i in &order {
                let (g, p) = (&grids[i], canvas.placements[i]);
                for r in 0..g.tensor.h() {
                    for col in 0..g.tensor.w() {
                        let dst = out.pixel_mut(p.row + r, p.col + col);
                        for (d, s) in dst.iter_mut().zip(g.tensor.pixel(r, col)) {
                            *d += s;
                        }
                    }
                }
            }
            Routes::Sum
        }
        AggregationMode::MaxOut => {
            let mut sel = vec![NONE; h * w * c];
            for &i in &order {
                let (g, p) = (&grids[i], canvas.placements[i]);
                for r in 0..g.tensor.h() {
                    for col in 0..g.tensor.w() {
                        let cell = (p.row + r) * w + p.col + col;
                        let src = g.tensor.pixel(r, col);
                        let dst = out.pixel_mut(p.row + r, p.col + col);
                        for ch in 0..c {
                            // strict comparison keeps the lowest source id on ties
                            if sel[cell * c + ch] == NONE || src[ch] > dst[ch] {
                                dst[ch] = src[ch];
                                sel[cell * c + ch] = i as u32;
                            }
                        }
                    }
                }
            }
            Routes::MaxOut(sel)
        }
        AggregationMode::MaxNorm => {
            let mut sel = vec![NONE; h * w];
            let mut best = vec![f64::NEG_INFINITY; h * w];
            for &i in &order {
                let (g, p) = (&grids[i], canvas.placements[i]);
                for r in 0..g.tensor.h() {
                    for col in 0..g.tensor.w() {
                        let cell = (p.row + r) * w + p.col + col;
                        let src = g.tensor.pixel(r, col);
                        let n2: f64 = src.iter().map(|v| v * v).sum();
                        if sel[cell] == NONE || n2 > best[cell] {
                            best[cell] = n2;
                            sel[cell] = i as u32;
                            out.pixel_mut(p.row + r, p.col + col).copy_from_slice(src);
                        }
                    }
                }
            }
            Routes::MaxNorm(sel)
        }
    };
    let source = grids[order[0]].source;
    Ok((
        FeatureGrid {
            tensor: out,
            extent: canvas.extent,
            k: canvas.k,
            source,
        },
        routes,
    ))
}

/// Gradients of the fused grid with respect to each input grid. Max modes
/// route each gradient entry to the input that was selected.
pub fn aggregate_backward(
    grids: &[FeatureGrid],
    canvas: &Canvas,
    routes: &Routes,
    upstream: &Tensor,
) -> Vec<Tensor> {
    let c = canvas.channels;
    let w = canvas.extent.width();
    grids
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let p = canvas.placements[i];
            let mut d = Tensor::zeros(g.tensor.h(), g.tensor.w(), c);
            for r in 0..g.tensor.h() {
                for col in 0..g.tensor.w() {
                    let cell = (p.row + r) * w + p.col + col;
                    let up = upstream.pixel(p.row + r, p.col + col);
                    let dst = d.pixel_mut(r, col);
                    match routes {
                        Routes::Sum => dst.copy_from_slice(up),
                        Routes::MaxOut(sel) => {
                            for ch in 0..c {
                                if sel[cell * c + ch] == i as u32 {
                                    dst[ch] = up[ch];
                                }
                            }
                        }
                        Routes::MaxNorm(sel) => {
                            if sel[cell] == i as u32 {
                                dst.copy_from_slice(up);
                            }
                        }
                    }
                }
            }
            d
        })
        .collect()
}

/// A grid reduced to a subset of its channels for transmission.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedGrid {
    pub grid: FeatureGrid,
    /// Original index of each carried channel.
    pub channels: Vec<u16>,
}

pub fn select_channels(grid: &FeatureGrid, keep: &[usize]) -> Result<SelectedGrid, AggregateError> {
    if keep.is_empty() {
        return Err(AggregateError::EmptySelection);
    }
    let c = grid.channels();
    let mut seen = vec![false; c];
    for &k in keep {
        if k >= c {
            return Err(AggregateError::ChannelOutOfRange { channel: k, c });
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(AggregateError::DuplicateChannel(k));
        }
    }
    let t = &grid.tensor;
    let tensor = Tensor::from_fn(t.h(), t.w(), keep.len(), |r, col, j| t.at(r, col, keep[j]));
    Ok(SelectedGrid {
        grid: FeatureGrid {
            tensor,
            ..grid.clone()
        },
        channels: keep.iter().map(|&k| k as u16).collect(),
    })
}

/// Receiver side of [`select_channels`]: dropped channels come back as zeros.
pub fn expand_channels(sel: &SelectedGrid, c: usize) -> Result<FeatureGrid, AggregateError> {
    let t = &sel.grid.tensor;
    let mut out = Tensor::zeros(t.h(), t.w(), c);
    for &ch in &sel.channels {
        if ch as usize >= c {
            return Err(AggregateError::ChannelOutOfRange {
                channel: ch as usize,
                c,
            });
        }
    }
    for r in 0..t.h() {
        for col in 0..t.w() {
            for (j, &ch) in sel.channels.iter().enumerate() {
                out.set(r, col, ch as usize, t.at(r, col, j));
            }
        }
    }
    Ok(FeatureGrid {
        tensor: out,
        ..sel.grid.clone()
    })
}
