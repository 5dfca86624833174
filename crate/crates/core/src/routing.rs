//! Routing between capsule layers.
//!
//! `idr` implements inverted dynamic routing: at every iteration the
//! locations within each head compete (softmax over the grid) for each
//! parent, the parent pose is the squashed weighted vote sum, and the
//! pre-softmax logits grow with the agreement between parent poses and
//! votes. The head activation maps are the per-location lengths of the
//! final weighted votes.
//!
//! `dynamic_routing_baseline` is the classical bottom-up scheme (children
//! spread their vote over parents) kept for ablations.
//!
//! Coefficient iterations run outside the differentiation graph by default;
//! gradients flow only through the final weighted sum and squash. The
//! `RoutingGrad::Differentiate` mode instead builds the iterations from
//! graph ops.

use crate::capsule::{squash, PoseField, VoteField, SQUASH_EPS};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// How routing coefficients participate in differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingGrad {
    /// Coefficients are constants for the backward pass (default).
    StopGradient,
    /// Differentiate through the coefficient iterations as well.
    Differentiate,
}

/// Routing coefficients `[N, heads, parents, h, w]`. For IDR each
/// (head, parent) map sums to one over the grid; for the bottom-up
/// baseline each (head, location) sums to one over parents.
#[derive(Clone)]
pub struct RoutingMap<F: Scalar> {
    pub coefficients: Tensor<F>,
}

/// Head activation maps `[N, heads, parents, h, w]`:
/// `sqrt(sum_d (R (.) V)^2)`, non-negative.
#[derive(Clone)]
pub struct HeadActivationMap<F: Scalar> {
    pub maps: Tensor<F>,
}

impl<F: Scalar> HeadActivationMap<F> {
    pub fn heads(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn parents(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.maps.shape()[3], self.maps.shape()[4])
    }
}

pub struct IdrOutput<F: Scalar> {
    /// Squashed parent poses `[N, parents, d]`, connected to the graph.
    pub parent_poses: Tensor<F>,
    pub ham: HeadActivationMap<F>,
    pub routing: RoutingMap<F>,
}

fn require_iters(n_iter: usize) -> Result<(), TensorError> {
    if n_iter == 0 {
        return Err(TensorError::Invalid {
            op: "routing",
            msg: "n_iter must be at least 1".to_string(),
        });
    }
    Ok(())
}

/// In-place squash of one pose vector, matching the graph-side `squash`
/// formula exactly.
fn squash_chunk<F: Scalar>(s: &mut [F]) {
    let mut n2 = F::zero();
    for &v in s.iter() {
        n2 += v * v;
    }
    let eps = F::cast_from(SQUASH_EPS);
    let unit = n2 / (n2 + F::one());
    let norm = (n2 + eps * eps).sqrt();
    let factor = unit / (norm + eps);
    for v in s.iter_mut() {
        *v = *v * factor;
    }
}

/// Softmax over contiguous blocks of length `block`.
fn softmax_blocks<F: Scalar>(logits: &[F], block: usize, out: &mut [F]) {
    for (src, dst) in logits.chunks(block).zip(out.chunks_mut(block)) {
        let mut max = F::neg_infinity();
        for &v in src {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            let e = (v - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
}

/// Graph-side completion shared by every routing variant: weight the votes
/// by constant coefficients, sum over heads and grid, and squash.
fn weighted_pose<F: Scalar>(
    votes: &VoteField<F>,
    coeffs: &Tensor<F>,
) -> TensorResult<F> {
    let mut cshape = coeffs.shape().to_vec();
    cshape.push(1);
    let r = coeffs.reshape(cshape)?;
    let weighted = votes.votes.mul(&r)?;
    let s = weighted.sum(&[1, 3, 4], false)?;
    squash(&s)
}

fn idr_detached<F: Scalar>(
    votes: &VoteField<F>,
    n_iter: usize,
    mut trace: Option<&mut Vec<Vec<F>>>,
) -> Vec<F> {
    let (n, heads, parents) = (votes.batch(), votes.heads, votes.parents);
    let (h, w, d) = (votes.height, votes.width, votes.dim);
    let xy = h * w;
    let vd = votes.votes.data();
    let mut r_pre = vec![F::zero(); n * heads * parents * xy];
    let mut r = vec![F::zero(); r_pre.len()];
    let mut s = vec![F::zero(); n * parents * d];

    for iter in 0..n_iter {
        // line 4: softmax among the capsules (grid locations) of each head
        softmax_blocks(&r_pre, xy, &mut r);
        if let Some(t) = trace.as_deref_mut() {
            t.push(r.clone());
        }
        // lines 5-6: weighted vote sum over heads and locations, squashed
        s.iter_mut().for_each(|v| *v = F::zero());
        for nn in 0..n {
            for i in 0..heads {
                for j in 0..parents {
                    let rbase = ((nn * heads + i) * parents + j) * xy;
                    let vbase = rbase * d;
                    let sbase = (nn * parents + j) * d;
                    for loc in 0..xy {
                        let c = r[rbase + loc];
                        let vrow = &vd[vbase + loc * d..vbase + loc * d + d];
                        for dd in 0..d {
                            s[sbase + dd] += c * vrow[dd];
                        }
                    }
                }
            }
        }
        for chunk in s.chunks_mut(d) {
            squash_chunk(chunk);
        }
        // line 7: agreement update (skipped after the final iteration,
        // where it could no longer affect anything)
        if iter + 1 < n_iter {
            for nn in 0..n {
                for i in 0..heads {
                    for j in 0..parents {
                        let rbase = ((nn * heads + i) * parents + j) * xy;
                        let vbase = rbase * d;
                        let pbase = (nn * parents + j) * d;
                        for loc in 0..xy {
                            let vrow = &vd[vbase + loc * d..vbase + loc * d + d];
                            let mut dot = F::zero();
                            for dd in 0..d {
                                dot += s[pbase + dd] * vrow[dd];
                            }
                            r_pre[rbase + loc] += dot;
                        }
                    }
                }
            }
        }
    }
    r
}

/// Head activation map per Eq.-style length of the weighted votes:
/// `sqrt(sum_d (r * v_d)^2) = r * |v|` since r >= 0.
fn ham_from<F: Scalar>(votes: &VoteField<F>, r: &[F]) -> Vec<F> {
    let d = votes.dim;
    let vd = votes.votes.data();
    r.iter()
        .enumerate()
        .map(|(loc, &c)| {
            let v = &vd[loc * d..(loc + 1) * d];
            let mut n2 = F::zero();
            for &x in v {
                n2 += x * x;
            }
            c * n2.sqrt()
        })
        .collect()
}

fn idr_graph<F: Scalar>(
    votes: &VoteField<F>,
    n_iter: usize,
) -> Result<(Tensor<F>, Tensor<F>), TensorError> {
    let (n, heads, parents) = (votes.batch(), votes.heads, votes.parents);
    let (h, w) = (votes.height, votes.width);
    let v = &votes.votes;
    let mut r_pre = Tensor::zeros(vec![n, heads, parents, h, w]);
    let mut r = r_pre.softmax(&[3, 4])?;
    let mut pose = weighted_pose(votes, &r)?;
    for _ in 1..n_iter {
        let p_b = pose.reshape(vec![n, 1, parents, 1, 1, votes.dim])?;
        let agreement = v.mul(&p_b)?.sum(&[5], false)?;
        r_pre = r_pre.add(&agreement)?;
        r = r_pre.softmax(&[3, 4])?;
        pose = weighted_pose(votes, &r)?;
    }
    Ok((pose, r))
}

/// Inverted dynamic routing over the full vote grid. Returns squashed
/// parent poses, the head activation maps, and the final routing map.
pub fn idr<F: Scalar>(
    votes: &VoteField<F>,
    n_iter: usize,
    grad: RoutingGrad,
) -> Result<IdrOutput<F>, TensorError> {
    require_iters(n_iter)?;
    votes.votes.check_finite("idr votes")?;
    let cshape = vec![
        votes.batch(),
        votes.heads,
        votes.parents,
        votes.height,
        votes.width,
    ];
    let (parent_poses, r_data) = match grad {
        RoutingGrad::StopGradient => {
            let r = idr_detached(votes, n_iter, None);
            let r_t = Tensor::from_vec(cshape.clone(), r.clone())?;
            (weighted_pose(votes, &r_t)?, r)
        }
        RoutingGrad::Differentiate => {
            let (pose, r) = idr_graph(votes, n_iter)?;
            (pose, r.data().to_vec())
        }
    };
    let ham = ham_from(votes, &r_data);
    Ok(IdrOutput {
        parent_poses,
        ham: HeadActivationMap {
            maps: Tensor::from_vec(cshape.clone(), ham)?,
        },
        routing: RoutingMap {
            coefficients: Tensor::from_vec(cshape, r_data)?,
        },
    })
}

/// `idr` with a per-iteration snapshot of the routing map (testing hook).
pub fn idr_traced<F: Scalar>(
    votes: &VoteField<F>,
    n_iter: usize,
) -> Result<(IdrOutput<F>, Vec<Vec<F>>), TensorError> {
    require_iters(n_iter)?;
    let mut trace = Vec::new();
    let r = idr_detached(votes, n_iter, Some(&mut trace));
    let cshape = vec![
        votes.batch(),
        votes.heads,
        votes.parents,
        votes.height,
        votes.width,
    ];
    let r_t = Tensor::from_vec(cshape.clone(), r.clone())?;
    let parent_poses = weighted_pose(votes, &r_t)?;
    let ham = ham_from(votes, &r);
    Ok((
        IdrOutput {
            parent_poses,
            ham: HeadActivationMap {
                maps: Tensor::from_vec(cshape.clone(), ham)?,
            },
            routing: RoutingMap { coefficients: r_t },
        },
        trace,
    ))
}

fn baseline_detached<F: Scalar>(votes: &VoteField<F>, n_iter: usize) -> Vec<F> {
    let (n, heads, parents) = (votes.batch(), votes.heads, votes.parents);
    let (h, w, d) = (votes.height, votes.width, votes.dim);
    let xy = h * w;
    let vd = votes.votes.data();
    let mut b = vec![F::zero(); n * heads * parents * xy];
    let mut r = vec![F::zero(); b.len()];
    let mut s = vec![F::zero(); n * parents * d];
    let stride_j = xy; // distance between consecutive parents at a fixed location

    for iter in 0..n_iter {
        // softmax over the parent axis for each (head, location) child
        for nn in 0..n {
            for i in 0..heads {
                let base = (nn * heads + i) * parents * xy;
                for loc in 0..xy {
                    let mut max = F::neg_infinity();
                    for j in 0..parents {
                        let v = b[base + j * stride_j + loc];
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = F::zero();
                    for j in 0..parents {
                        let e = (b[base + j * stride_j + loc] - max).exp();
                        r[base + j * stride_j + loc] = e;
                        sum += e;
                    }
                    for j in 0..parents {
                        r[base + j * stride_j + loc] = r[base + j * stride_j + loc] / sum;
                    }
                }
            }
        }
        s.iter_mut().for_each(|v| *v = F::zero());
        for nn in 0..n {
            for i in 0..heads {
                for j in 0..parents {
                    let rbase = ((nn * heads + i) * parents + j) * xy;
                    let vbase = rbase * d;
                    let sbase = (nn * parents + j) * d;
                    for loc in 0..xy {
                        let c = r[rbase + loc];
                        let vrow = &vd[vbase + loc * d..vbase + loc * d + d];
                        for dd in 0..d {
                            s[sbase + dd] += c * vrow[dd];
                        }
                    }
                }
            }
        }
        for chunk in s.chunks_mut(d) {
            squash_chunk(chunk);
        }
        if iter + 1 < n_iter {
            for nn in 0..n {
                for i in 0..heads {
                    for j in 0..parents {
                        let rbase = ((nn * heads + i) * parents + j) * xy;
                        let vbase = rbase * d;
                        let pbase = (nn * parents + j) * d;
                        for loc in 0..xy {
                            let vrow = &vd[vbase + loc * d..vbase + loc * d + d];
                            let mut dot = F::zero();
                            for dd in 0..d {
                                dot += s[pbase + dd] * vrow[dd];
                            }
                            b[rbase + loc] += dot;
                        }
                    }
                }
            }
        }
    }
    r
}

pub struct BaselineOutput<F: Scalar> {
    pub parent_poses: Tensor<F>,
    pub routing: RoutingMap<F>,
}

/// Bottom-up dynamic routing over the full grid: children (head x location)
/// spread their vote over parents. Same weighted-sum / squash / agreement
/// structure as `idr`; emits no activation maps.
pub fn dynamic_routing_baseline<F: Scalar>(
    votes: &VoteField<F>,
    n_iter: usize,
) -> TensorResult<F> {
    Ok(dynamic_routing_baseline_full(votes, n_iter)?.parent_poses)
}

/// Baseline routing with the final coefficients exposed.
pub fn dynamic_routing_baseline_full<F: Scalar>(
    votes: &VoteField<F>,
    n_iter: usize,
) -> Result<BaselineOutput<F>, TensorError> {
    require_iters(n_iter)?;
    votes.votes.check_finite("baseline routing votes")?;
    let r = baseline_detached(votes, n_iter);
    let cshape = vec![
        votes.batch(),
        votes.heads,
        votes.parents,
        votes.height,
        votes.width,
    ];
    let r_t = Tensor::from_vec(cshape, r)?;
    let parent_poses = weighted_pose(votes, &r_t)?;
    Ok(BaselineOutput {
        parent_poses,
        routing: RoutingMap { coefficients: r_t },
    })
}

/// Recompute head activation maps from a vote field and routing
/// coefficients: `sqrt(sum_d (r * v_d)^2)` per location.
pub fn activation_maps_from<F: Scalar>(
    votes: &VoteField<F>,
    routing: &RoutingMap<F>,
) -> Result<HeadActivationMap<F>, TensorError> {
    let expected = [
        votes.batch(),
        votes.heads,
        votes.parents,
        votes.height,
        votes.width,
    ];
    if routing.coefficients.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "activation_maps_from",
            lhs: routing.coefficients.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let maps = ham_from(votes, routing.coefficients.data());
    Ok(HeadActivationMap {
        maps: Tensor::from_vec(expected.to_vec(), maps)?,
    })
}

/// Mean over the head axis of one class's activation maps: `[N, h, w]`.
pub fn average_ham<F: Scalar>(
    ham: &HeadActivationMap<F>,
    class: usize,
) -> TensorResult<F> {
    if class >= ham.parents() {
        return Err(TensorError::Invalid {
            op: "average_ham",
            msg: format!("class {} out of {} parents", class, ham.parents()),
        });
    }
    let s = ham.maps.shape();
    let (n, heads, _, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    ham.maps
        .slice(&[(0, n), (0, heads), (class, class + 1), (0, h), (0, w)])?
        .mean(&[1], false)?
        .reshape(vec![n, h, w])
}

/// Per-location routing used inside convolutional capsule layers: every
/// output location is its own routing instance over a single-location grid.
/// For IDR the within-head softmax over one location is identically 1 at
/// every iteration, so the parent pose reduces to the squashed head sum.
pub fn route_conv_idr<F: Scalar>(votes: &VoteField<F>) -> Result<PoseField<F>, TensorError> {
    let s = votes.votes.sum(&[1], false)?; // [N, parents, h, w, d]
    PoseField::new(squash(&s)?)
}

/// Per-location bottom-up routing: coefficients over parents per
/// (head, location), iterated with local agreement, then the graph-side
/// weighted head sum and squash.
pub fn route_conv_baseline<F: Scalar>(
    votes: &VoteField<F>,
    n_iter: usize,
) -> Result<PoseField<F>, TensorError> {
    require_iters(n_iter)?;
    let (n, heads, parents) = (votes.batch(), votes.heads, votes.parents);
    let (h, w, d) = (votes.height, votes.width, votes.dim);
    let xy = h * w;
    let vd = votes.votes.data();
    let mut b = vec![F::zero(); n * heads * parents * xy];
    let mut r = vec![F::zero(); b.len()];
    // local parent poses, one per (n, j, location)
    let mut s = vec![F::zero(); n * parents * xy * d];

    for iter in 0..n_iter {
        for nn in 0..n {
            for i in 0..heads {
                let base = (nn * heads + i) * parents * xy;
                for loc in 0..xy {
                    let mut max = F::neg_infinity();
                    for j in 0..parents {
                        let v = b[base + j * xy + loc];
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = F::zero();
                    for j in 0..parents {
                        let e = (b[base + j * xy + loc] - max).exp();
                        r[base + j * xy + loc] = e;
                        sum += e;
                    }
                    for j in 0..parents {
                        r[base + j * xy + loc] = r[base + j * xy + loc] / sum;
                    }
                }
            }
        }
        s.iter_mut().for_each(|v| *v = F::zero());
        for nn in 0..n {
            for i in 0..heads {
                for j in 0..parents {
                    let rbase = ((nn * heads + i) * parents + j) * xy;
                    let vbase = rbase * d;
                    for loc in 0..xy {
                        let c = r[rbase + loc];
                        let vrow = &vd[vbase + loc * d..vbase + loc * d + d];
                        let sbase = ((nn * parents + j) * xy + loc) * d;
                        for dd in 0..d {
                            s[sbase + dd] += c * vrow[dd];
                        }
                    }
                }
            }
        }
        for chunk in s.chunks_mut(d) {
            squash_chunk(chunk);
        }
        if iter + 1 < n_iter {
            for nn in 0..n {
                for i in 0..heads {
                    for j in 0..parents {
                        let rbase = ((nn * heads + i) * parents + j) * xy;
                        let vbase = rbase * d;
                        for loc in 0..xy {
                            let vrow = &vd[vbase + loc * d..vbase + loc * d + d];
                            let sbase = ((nn * parents + j) * xy + loc) * d;
                            let mut dot = F::zero();
                            for dd in 0..d {
                                dot += s[sbase + dd] * vrow[dd];
                            }
                            b[rbase + loc] += dot;
                        }
                    }
                }
            }
        }
    }

    let r_t = Tensor::from_vec(vec![n, heads, parents, h, w, 1], r)?;
    let weighted = votes.votes.mul(&r_t)?;
    let summed = weighted.sum(&[1], false)?; // [N, parents, h, w, d]
    PoseField::new(squash(&summed)?)
}
