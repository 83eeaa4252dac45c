//! Minimal reverse-mode autodiff over [`Mat`] values.
//!
//! The graph is built eagerly: each method computes its value immediately via
//! the shared kernels in [`crate::kernels`] and records the op for the
//! backward sweep. Sequence-structured ops carry a `seq_len` and treat their
//! input as a batch of contiguous row blocks, which lets one node process all
//! (channel, band) sequences of a layer at once.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels as k;
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::spectral::{self, StftConfig};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    Exp(usize),
    SoftplusFloor(usize, T),
    Prelu {
        x: usize,
        slope: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    GroupNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: T,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        eps: T,
    },
    Conv1dCausal {
        x: usize,
        w: usize,
        b: usize,
        seq_len: usize,
    },
    SsdScan {
        x: usize,
        a: usize,
        b: usize,
        c: usize,
        seq_len: usize,
        heads: usize,
        pdim: usize,
        dstate: usize,
        states: Vec<T>,
    },
    ScaleHeads {
        x: usize,
        s: usize,
        heads: usize,
    },
    BroadcastRow {
        v: usize,
    },
    SliceCols {
        x: usize,
        off: usize,
    },
    ConcatCols {
        xs: Vec<usize>,
    },
    SliceRows {
        x: usize,
        off: usize,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    DeinterleaveCols {
        x: usize,
        phase: usize,
    },
    InterleaveCols {
        a: usize,
        b: usize,
    },
    ReverseRows {
        x: usize,
        seq_len: usize,
    },
    PermuteRows {
        x: usize,
        perm: Arc<Vec<usize>>,
    },
    Istft {
        re: usize,
        im: usize,
        cfg: StftConfig,
        frames: usize,
    },
    AbsDiffMean {
        a: usize,
        b: usize,
    },
}

struct Node<T: Scalar> {
    value: Mat<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data()[0]
    }

    pub fn ensure_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    // -- leaves ------------------------------------------------------------

    pub fn param(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let av = self.value(a);
        assert_eq!(av.shape(), bv.shape(), "sub shape");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let av = self.value(a);
        assert_eq!(av.shape(), bv.shape(), "mul shape");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = k::tanh_m(self.value(a));
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = k::sigmoid_m(self.value(a));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = k::silu_m(self.value(a));
        self.push(v, Op::Silu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a.0))
    }

    pub fn softplus_floor(&mut self, a: Var, floor: T) -> Var {
        let v = k::softplus_floor_m(self.value(a), floor);
        self.push(v, Op::SoftplusFloor(a.0, floor))
    }

    /// PReLU with a learnable scalar slope (`slope` is a `[1, 1]` node).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let s = self.scalar(slope);
        let v = k::prelu_m(self.value(x), s);
        self.push(v, Op::Prelu { x: x.0, slope: slope.0 })
    }

    // -- structured ops ----------------------------------------------------

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let v = k::linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        self.push(
            v,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
        )
    }

    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let v = k::group_norm(self.value(x), self.value(gain), self.value(bias), eps);
        self.push(
            v,
            Op::GroupNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Var {
        let v = k::rms_norm(self.value(x), self.value(gain), eps);
        self.push(
            v,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                eps,
            },
        )
    }

    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, seq_len: usize) -> Var {
        let v = k::conv1d_causal(self.value(x), self.value(w), self.value(b), seq_len);
        self.push(
            v,
            Op::Conv1dCausal {
                x: x.0,
                w: w.0,
                b: b.0,
                seq_len,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn ssd_scan(
        &mut self,
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        seq_len: usize,
        heads: usize,
        pdim: usize,
        dstate: usize,
    ) -> Var {
        let mut states = Vec::new();
        let v = k::ssd_scan_shared(
            self.value(x),
            self.value(a),
            self.value(b),
            self.value(c),
            seq_len,
            heads,
            pdim,
            dstate,
            Some(&mut states),
        );
        self.push(
            v,
            Op::SsdScan {
                x: x.0,
                a: a.0,
                b: b.0,
                c: c.0,
                seq_len,
                heads,
                pdim,
                dstate,
                states,
            },
        )
    }

    pub fn scale_heads(&mut self, x: Var, s: Var, heads: usize) -> Var {
        let v = k::scale_heads(self.value(x), self.value(s), heads);
        self.push(v, Op::ScaleHeads { x: x.0, s: s.0, heads })
    }

    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> Var {
        let m = k::broadcast_row(self.value(v), rows);
        self.push(m, Op::BroadcastRow { v: v.0 })
    }

    pub fn slice_cols(&mut self, x: Var, off: usize, len: usize) -> Var {
        let v = k::slice_cols(self.value(x), off, len);
        self.push(v, Op::SliceCols { x: x.0, off })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = xs.iter().map(|v| self.value(*v)).collect();
        let v = k::concat_cols(&mats);
        self.push(
            v,
            Op::ConcatCols {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, off: usize, len: usize) -> Var {
        let v = k::slice_rows(self.value(x), off, len);
        self.push(v, Op::SliceRows { x: x.0, off })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = xs.iter().map(|v| self.value(*v)).collect();
        let v = k::concat_rows(&mats);
        self.push(
            v,
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        )
    }

    pub fn deinterleave_cols(&mut self, x: Var, phase: usize) -> Var {
        let v = k::deinterleave_cols(self.value(x), phase);
        self.push(v, Op::DeinterleaveCols { x: x.0, phase })
    }

    pub fn interleave_cols(&mut self, a: Var, b: Var) -> Var {
        let v = k::interleave_cols(self.value(a), self.value(b));
        self.push(v, Op::InterleaveCols { a: a.0, b: b.0 })
    }

    pub fn reverse_rows(&mut self, x: Var, seq_len: usize) -> Var {
        let v = k::reverse_rows(self.value(x), seq_len);
        self.push(v, Op::ReverseRows { x: x.0, seq_len })
    }

    pub fn permute_rows(&mut self, x: Var, perm: Arc<Vec<usize>>) -> Var {
        let v = k::permute_rows(self.value(x), &perm);
        self.push(v, Op::PermuteRows { x: x.0, perm })
    }

    /// ISTFT of one channel plane: `re`/`im` are `[frames, bins]`, the output
    /// is a `[1, length]` waveform node.
    pub fn istft(&mut self, re: Var, im: Var, cfg: StftConfig, length: usize) -> Result<Var> {
        let rev = self.value(re);
        let imv = self.value(im);
        let frames = rev.rows();
        let wave = spectral::istft_plane(rev.data(), imv.data(), frames, &cfg, length)?;
        let v = Mat::row_vec(&wave);
        Ok(self.push(
            v,
            Op::Istft {
                re: re.0,
                im: im.0,
                cfg,
                frames,
            },
        ))
    }

    /// Mean absolute difference between two same-shape nodes, as a scalar node.
    pub fn abs_diff_mean(&mut self, a: Var, b: Var) -> Var {
        let v = k::abs_diff_mean(self.value(a), self.value(b));
        self.push(Mat::scalar(v), Op::AbsDiffMean { a: a.0, b: b.0 })
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns per-node cotangents.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(T::one()));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn accumulate(&self, id: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let add_to = |grads: &mut [Option<Mat<T>>], target: usize, delta: Mat<T>| {
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let ga = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                );
                let gb = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                );
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                add_to(grads, *a, g.map(|x| x * c));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let delta = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect(),
                );
                add_to(grads, *a, delta);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let delta = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect(),
                );
                add_to(grads, *a, delta);
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let delta = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| gv * k::silu_grad(xv))
                        .collect(),
                );
                add_to(grads, *a, delta);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let delta = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect(),
                );
                add_to(grads, *a, delta);
            }
            Op::SoftplusFloor(a, floor) => {
                let x = &self.nodes[*a].value;
                let floor = *floor;
                let delta = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| {
                            if k::softplus(xv) > floor {
                                gv * k::sigmoid(xv)
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
                add_to(grads, *a, delta);
            }
            Op::Prelu { x, slope } => {
                let xv = &self.nodes[*x].value;
                let s = self.nodes[*slope].value.data()[0];
                let mut gslope = T::zero();
                let mut gx = Mat::zeros(g.rows(), g.cols());
                for (i, (&gv, &xval)) in g.data().iter().zip(xv.data()).enumerate() {
                    if xval > T::zero() {
                        gx.data_mut()[i] = gv;
                    } else {
                        gx.data_mut()[i] = gv * s;
                        gslope += gv * xval;
                    }
                }
                add_to(grads, *x, gx);
                add_to(grads, *slope, Mat::scalar(gslope));
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                add_to(grads, *x, k::linear_grad_x(g, wv));
                add_to(grads, *w, k::linear_grad_w(xv, g));
                if let Some(b) = b {
                    add_to(grads, *b, k::col_sums(g));
                }
            }
            Op::GroupNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (gx, ggain, gbias) = k::group_norm_bwd(xv, gv, *eps, g);
                add_to(grads, *x, gx);
                add_to(grads, *gain, ggain);
                add_to(grads, *bias, gbias);
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (gx, ggain) = k::rms_norm_bwd(xv, gv, *eps, g);
                add_to(grads, *x, gx);
                add_to(grads, *gain, ggain);
            }
            Op::Conv1dCausal { x, w, b, seq_len } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (gx, gw, gb) = k::conv1d_causal_bwd(xv, wv, *seq_len, g);
                add_to(grads, *x, gx);
                add_to(grads, *w, gw);
                add_to(grads, *b, gb);
            }
            Op::SsdScan {
                x,
                a,
                b,
                c,
                seq_len,
                heads,
                pdim,
                dstate,
                states,
            } => {
                let (gx, ga, gb, gc) = k::ssd_scan_shared_bwd(
                    &self.nodes[*x].value,
                    &self.nodes[*a].value,
                    &self.nodes[*b].value,
                    &self.nodes[*c].value,
                    *seq_len,
                    *heads,
                    *pdim,
                    *dstate,
                    states,
                    g,
                );
                add_to(grads, *x, gx);
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
                add_to(grads, *c, gc);
            }
            Op::ScaleHeads { x, s, heads } => {
                let (gx, gs) =
                    k::scale_heads_bwd(&self.nodes[*x].value, &self.nodes[*s].value, *heads, g);
                add_to(grads, *x, gx);
                add_to(grads, *s, gs);
            }
            Op::BroadcastRow { v } => {
                add_to(grads, *v, k::col_sums(g));
            }
            Op::SliceCols { x, off } => {
                let xv = &self.nodes[*x].value;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    gx.row_mut(r)[*off..*off + grow.len()].copy_from_slice(grow);
                }
                add_to(grads, *x, gx);
            }
            Op::ConcatCols { xs } => {
                let mut off = 0;
                for &xid in xs {
                    let cols = self.nodes[xid].value.cols();
                    add_to(grads, xid, k::slice_cols(g, off, cols));
                    off += cols;
                }
            }
            Op::SliceRows { x, off } => {
                let xv = &self.nodes[*x].value;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(off + r).copy_from_slice(g.row(r));
                }
                add_to(grads, *x, gx);
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &xid in xs {
                    let rows = self.nodes[xid].value.rows();
                    add_to(grads, xid, k::slice_rows(g, off, rows));
                    off += rows;
                }
            }
            Op::DeinterleaveCols { x, phase } => {
                let xv = &self.nodes[*x].value;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    let gxrow = gx.row_mut(r);
                    for (i, &gv) in grow.iter().enumerate() {
                        gxrow[2 * i + phase] = gv;
                    }
                }
                add_to(grads, *x, gx);
            }
            Op::InterleaveCols { a, b } => {
                add_to(grads, *a, k::deinterleave_cols(g, 0));
                add_to(grads, *b, k::deinterleave_cols(g, 1));
            }
            Op::ReverseRows { x, seq_len } => {
                add_to(grads, *x, k::reverse_rows(g, *seq_len));
            }
            Op::PermuteRows { x, perm } => {
                let xv = &self.nodes[*x].value;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for (r, &src) in perm.iter().enumerate() {
                    gx.row_mut(src).copy_from_slice(g.row(r));
                }
                add_to(grads, *x, gx);
            }
            Op::Istft { re, im, cfg, frames } => {
                let (gre, gim) = spectral::istft_plane_adjoint(g.row(0), *frames, cfg);
                let bins = cfg.bins();
                add_to(grads, *re, Mat::from_vec(*frames, bins, gre));
                add_to(grads, *im, Mat::from_vec(*frames, bins, gim));
            }
            Op::AbsDiffMean { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let scale = g.data()[0] / T::of(av.len() as f64);
                let mut ga = Mat::zeros(av.rows(), av.cols());
                for (i, (&x, &y)) in av.data().iter().zip(bv.data()).enumerate() {
                    let s = if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    };
                    ga.data_mut()[i] = s;
                }
                let gb = ga.map(|x| -x);
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
        }
    }
}

/// Cotangents produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Mat<T>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of a leaf, all-zeros if the loss does not depend on it.
    pub fn of_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat<T> {
        match self.by_node[v.0].as_ref() {
            Some(m) => m.clone(),
            None => Mat::zeros(shape.0, shape.1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn randmat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    /// FD harness: `build` maps parameter leaves to an output node; the test
    /// loss is `mean |W ⊙ y - target|` where `target` sits an O(1) distance
    /// below the unperturbed `W ⊙ y`, so the l1 kink is never crossed and the
    /// finite differences stay well conditioned.
    fn check_grads(
        params: &[Mat<f64>],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        // Probe pass to size the weights and target around the actual output.
        let (w, target) = {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let y = build(&mut g, &vars);
            let yv = g.value(y);
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(999);
            let w = Mat::from_fn(yv.rows(), yv.cols(), |_, _| r.random_range(0.5..1.5));
            let mut target = Mat::zeros(yv.rows(), yv.cols());
            for i in 0..yv.len() {
                target.data_mut()[i] = w.data()[i] * yv.data()[i] - r.random_range(0.5..1.5);
            }
            (w, target)
        };

        let run = |ps: &[Mat<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let y = build(&mut g, &vars);
            let wv = g.constant(w.clone());
            let tv = g.constant(target.clone());
            let prod = g.mul(y, wv);
            let loss = g.abs_diff_mean(prod, tv);
            (g, vars, loss)
        };

        let (g, vars, loss) = run(params);
        let grads = g.backward(loss);

        let eps = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.of_or_zeros(vars[pi], p.shape());
            for idx in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[idx] += eps;
                let (gp, _, lp) = run(&plus);
                let mut minus = params.to_vec();
                minus[pi].data_mut()[idx] -= eps;
                let (gm, _, lm) = run(&minus);
                let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * eps);
                let an = analytic.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "param {pi} elem {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_activation_grads() {
        check_grads(
            &[randmat(3, 4, 1), randmat(3, 4, 2)],
            |g, v| {
                let s = g.add(v[0], v[1]);
                let m = g.mul(s, v[0]);
                let t = g.tanh(m);
                let sg = g.sigmoid(t);
                let si = g.silu(sg);
                let sc = g.scale(si, 1.7);
                let d = g.sub(sc, v[1]);
                g.exp(d)
            },
            1e-5,
        );
    }

    #[test]
    fn softplus_floor_and_prelu_grads() {
        check_grads(
            &[randmat(2, 5, 3), Mat::scalar(0.25)],
            |g, v| {
                let sp = g.softplus_floor(v[0], 1e-4);
                g.prelu(sp, v[1])
            },
            1e-5,
        );
        // prelu must see negative inputs too
        check_grads(
            &[randmat(4, 4, 17), Mat::scalar(0.3)],
            |g, v| g.prelu(v[0], v[1]),
            1e-5,
        );
    }

    #[test]
    fn linear_and_norm_grads() {
        check_grads(
            &[
                randmat(4, 3, 5),
                randmat(3, 6, 6),
                randmat(1, 6, 7),
                randmat(1, 6, 8),
                randmat(1, 6, 9),
            ],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]));
                let n = g.group_norm(y, v[3], v[4], 1e-5);
                g.rms_norm(n, v[3], 1e-6)
            },
            1e-4,
        );
    }

    #[test]
    fn conv_scan_and_head_grads() {
        let seq = 5;
        let heads = 2;
        let pdim = 3;
        let dstate = 2;
        check_grads(
            &[
                randmat(2 * seq, heads * pdim, 10), // x for two sequences
                randmat(heads * pdim, 4, 11),       // conv w
                randmat(1, heads * pdim, 12),       // conv b
                randmat(2 * seq, dstate, 13),       // b
                randmat(2 * seq, dstate, 14),       // c
                randmat(2 * seq, heads, 15),        // decay logits
            ],
            |g, v| {
                let xc = g.conv1d_causal(v[0], v[1], v[2], seq);
                let a = g.sigmoid(v[5]); // keep decay in (0, 1)
                let y = g.ssd_scan(xc, a, v[3], v[4], seq, heads, pdim, dstate);
                g.scale_heads(y, a, heads)
            },
            1e-4,
        );
    }

    #[test]
    fn layout_op_grads() {
        let perm = Arc::new(vec![3usize, 1, 0, 2]);
        check_grads(
            &[randmat(4, 6, 20), randmat(1, 3, 21)],
            |g, v| {
                let p = g.permute_rows(v[0], perm.clone());
                let r = g.reverse_rows(p, 2);
                let a = g.slice_cols(r, 0, 3);
                let b = g.slice_cols(r, 3, 3);
                let bb = g.broadcast_row(v[1], 4);
                let m = g.mul(b, bb);
                let cat = g.concat_cols(&[a, m]);
                let top = g.slice_rows(cat, 0, 2);
                let bot = g.slice_rows(cat, 2, 2);
                let rows = g.concat_rows(&[bot, top]);
                let even = g.deinterleave_cols(rows, 0);
                let odd = g.deinterleave_cols(rows, 1);
                g.interleave_cols(odd, even)
            },
            1e-5,
        );
    }

    #[test]
    fn istft_grads() {
        let cfg = StftConfig {
            n_fft: 16,
            hop: 4,
            sample_rate: 8000,
            ..Default::default()
        };
        let frames = 4;
        let bins = cfg.bins();
        check_grads(
            &[randmat(frames, bins, 30), randmat(frames, bins, 31)],
            |g, v| g.istft(v[0], v[1], cfg, 14).unwrap(),
            1e-5,
        );
    }

    #[test]
    fn abs_diff_mean_grad_and_value() {
        let a = Mat::from_vec(1, 4, vec![1.0, -2.0, 3.0, 0.5]);
        let b = Mat::from_vec(1, 4, vec![0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let av = g.param(a);
        let bv = g.constant(b);
        let loss = g.abs_diff_mean(av, bv);
        assert!((g.scalar(loss) - 6.5f64 / 4.0).abs() < 1e-12);
        let grads = g.backward(loss);
        assert_eq!(
            grads.of(av).unwrap().data(),
            &[0.25, -0.25, 0.25, 0.25]
        );
    }

    #[test]
    fn grads_flow_through_shared_subexpressions() {
        // y = x*x + x -> dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Mat::scalar(3.0));
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let grads = g.backward(y);
        assert!((grads.of(x).unwrap().data()[0] - 7.0f64).abs() < 1e-12);
    }
}
