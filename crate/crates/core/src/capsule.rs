//! Capsule primitives: squash, pose activations, primary capsule formation,
//! convolutional capsule votes with head-shared transforms, and coordinate
//! addition.
//!
//! Layout conventions (row-major tensors):
//!   poses  [N, heads, h, w, d]
//!   votes  [N, heads, parents, h, w, d_out]
//! The leading batch axis is always present; single-sample fields use N=1.

use crate::scalar::Scalar;
use crate::tensor::{GradFn, Tensor, TensorError, TensorResult};

/// Guard for the squash denominator, which is singular at the zero vector.
pub const SQUASH_EPS: f64 = 1e-12;

/// Norm-shrinking nonlinearity over the trailing (pose) axis:
/// `out = (|s|^2 / (1 + |s|^2)) * s / |s|`, with output norm strictly
/// below 1 and the zero vector mapped to itself.
pub fn squash<F: Scalar>(s: &Tensor<F>) -> TensorResult<F> {
    if s.rank() == 0 {
        return Err(TensorError::Invalid {
            op: "squash",
            msg: "needs at least one axis".to_string(),
        });
    }
    let last = s.rank() - 1;
    let n2 = s.square()?.sum(&[last], true)?;
    let unit = n2.div(&n2.add_scalar(F::one())?)?;
    let eps = F::cast_from(SQUASH_EPS);
    let norm = n2.add_scalar(eps * eps)?.sqrt()?;
    let factor = unit.div(&norm.add_scalar(eps)?)?;
    s.mul(&factor)
}

/// Per-head grid of capsule pose vectors (flattened square pose matrices).
#[derive(Clone)]
pub struct PoseField<F: Scalar> {
    pub poses: Tensor<F>,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl<F: Scalar> PoseField<F> {
    /// Wrap a `[N, heads, h, w, d]` (or `[heads, h, w, d]`, implying N=1)
    /// tensor. The pose length must be a perfect square.
    pub fn new(poses: Tensor<F>) -> Result<Self, TensorError> {
        let poses = match poses.rank() {
            5 => poses,
            4 => {
                let mut s = vec![1];
                s.extend_from_slice(poses.shape());
                poses.reshape(s)?
            }
            _ => {
                return Err(TensorError::Invalid {
                    op: "pose_field",
                    msg: format!("expected rank 4 or 5, got {:?}", poses.shape()),
                })
            }
        };
        let d = poses.shape()[4];
        let root = (d as f64).sqrt().round() as usize;
        if root * root != d {
            return Err(TensorError::Invalid {
                op: "pose_field",
                msg: format!("pose length {d} is not a perfect square"),
            });
        }
        Ok(PoseField {
            heads: poses.shape()[1],
            height: poses.shape()[2],
            width: poses.shape()[3],
            dim: d,
            poses,
        })
    }

    pub fn batch(&self) -> usize {
        self.poses.shape()[0]
    }
}

/// Existence probability of each capsule: the Frobenius norm of its
/// squashed pose, which works out to `|s|^2 / (1 + |s|^2)`.
/// Output shape `[N, heads, h, w]`.
pub fn pose_activation<F: Scalar>(field: &PoseField<F>) -> TensorResult<F> {
    let n2 = field.poses.square()?.sum(&[4], false)?;
    n2.div(&n2.add_scalar(F::one())?)
}

/// One shared transformation matrix per (head, parent) pair.
#[derive(Clone)]
pub struct TransformBank<F: Scalar> {
    pub weights: Tensor<F>,
    pub heads: usize,
    pub parents: usize,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl<F: Scalar> TransformBank<F> {
    pub fn new(weights: Tensor<F>) -> Result<Self, TensorError> {
        if weights.rank() != 4 {
            return Err(TensorError::Invalid {
                op: "transform_bank",
                msg: format!("expected [heads, parents, d_in, d_out], got {:?}", weights.shape()),
            });
        }
        Ok(TransformBank {
            heads: weights.shape()[0],
            parents: weights.shape()[1],
            dim_in: weights.shape()[2],
            dim_out: weights.shape()[3],
            weights,
        })
    }
}

/// Votes from every capsule of every head to every parent.
#[derive(Clone)]
pub struct VoteField<F: Scalar> {
    pub votes: Tensor<F>,
    pub heads: usize,
    pub parents: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl<F: Scalar> VoteField<F> {
    /// Wrap a `[N, heads, parents, h, w, d]` (or rank-5, implying N=1) tensor.
    pub fn new(votes: Tensor<F>) -> Result<Self, TensorError> {
        let votes = match votes.rank() {
            6 => votes,
            5 => {
                let mut s = vec![1];
                s.extend_from_slice(votes.shape());
                votes.reshape(s)?
            }
            _ => {
                return Err(TensorError::Invalid {
                    op: "vote_field",
                    msg: format!("expected rank 5 or 6, got {:?}", votes.shape()),
                })
            }
        };
        Ok(VoteField {
            heads: votes.shape()[1],
            parents: votes.shape()[2],
            height: votes.shape()[3],
            width: votes.shape()[4],
            dim: votes.shape()[5],
            votes,
        })
    }

    pub fn batch(&self) -> usize {
        self.votes.shape()[0]
    }
}

/// Primary capsules: a learned 1x1 projection of the backbone features,
/// reshaped into `heads` grids of pose vectors. `projection` is
/// `[channels, heads * dim]`; its output channel count must equal
/// heads * dim.
pub fn primary_capsules<F: Scalar>(
    features: &Tensor<F>,
    projection: &Tensor<F>,
    heads: usize,
    dim: usize,
) -> Result<PoseField<F>, TensorError> {
    if features.rank() != 4 {
        return Err(TensorError::Invalid {
            op: "primary_capsules",
            msg: format!("features must be [N, A, h, w], got {:?}", features.shape()),
        });
    }
    let (n, a, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
        features.shape()[3],
    );
    if projection.rank() != 2 || projection.shape()[0] != a || projection.shape()[1] != heads * dim
    {
        return Err(TensorError::Invalid {
            op: "primary_capsules",
            msg: format!(
                "projection {:?} incompatible with {} channels and {} heads x {} dim",
                projection.shape(),
                a,
                heads,
                dim
            ),
        });
    }
    let flat = features
        .permute(&[0, 2, 3, 1])?
        .reshape(vec![n * h * w, a])?;
    let poses = flat
        .matmul(projection)?
        .reshape(vec![n, h, w, heads, dim])?
        .permute(&[0, 3, 1, 2, 4])?;
    PoseField::new(poses)
}

struct WindowMixGrad {
    kernel: usize,
    stride: usize,
}

impl<F: Scalar> GradFn<F> for WindowMixGrad {
    fn name(&self) -> &'static str {
        "window_mix"
    }

    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let (poses, kern) = (&parents[0], &parents[1]);
        let (n, heads, ho, wo, d) = (
            out_shape[0],
            out_shape[1],
            out_shape[2],
            out_shape[3],
            out_shape[4],
        );
        let (h, w) = (poses.shape()[2], poses.shape()[3]);
        let k = self.kernel;
        let s = self.stride;
        let pd = poses.data();
        let kd = kern.data();
        let need_p = poses.requires_grad();
        let need_k = kern.requires_grad();
        let mut dp = if need_p { vec![F::zero(); poses.numel()] } else { Vec::new() };
        let mut dk = if need_k { vec![F::zero(); kern.numel()] } else { Vec::new() };
        for nn in 0..n {
            for b in 0..heads {
                for i in 0..ho {
                    for j in 0..wo {
                        let go = ((((nn * heads) + b) * ho + i) * wo + j) * d;
                        for u in 0..k {
                            for v in 0..k {
                                let kidx = (b * k + u) * k + v;
                                let po = ((((nn * heads) + b) * h + (i * s + u)) * w
                                    + (j * s + v))
                                    * d;
                                if need_p {
                                    let kv = kd[kidx];
                                    for dd in 0..d {
                                        dp[po + dd] += kv * grad[go + dd];
                                    }
                                }
                                if need_k {
                                    let mut acc = F::zero();
                                    for dd in 0..d {
                                        acc += grad[go + dd] * pd[po + dd];
                                    }
                                    dk[kidx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![
            if need_p { Some(dp) } else { None },
            if need_k { Some(dk) } else { None },
        ]
    }
}

/// Mix child poses within each KxK window (valid padding) using a learned
/// per-head spatial kernel: `out[n,b,i,j,:] = sum_{u,v} kern[b,u,v] *
/// poses[n,b,i*s+u,j*s+v,:]`.
pub fn window_mix<F: Scalar>(
    field: &PoseField<F>,
    kern: &Tensor<F>,
    stride: usize,
) -> Result<PoseField<F>, TensorError> {
    let poses = &field.poses;
    if kern.rank() != 3 || kern.shape()[0] != field.heads || kern.shape()[1] != kern.shape()[2] {
        return Err(TensorError::Invalid {
            op: "window_mix",
            msg: format!(
                "kernel {:?} incompatible with {} heads",
                kern.shape(),
                field.heads
            ),
        });
    }
    let k = kern.shape()[1];
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: "window_mix",
            msg: "stride must be positive".to_string(),
        });
    }
    if field.height < k || field.width < k {
        return Err(TensorError::Invalid {
            op: "window_mix",
            msg: format!(
                "grid {}x{} smaller than kernel {k}",
                field.height, field.width
            ),
        });
    }
    let (n, heads, h, w, d) = (
        field.batch(),
        field.heads,
        field.height,
        field.width,
        field.dim,
    );
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let pd = poses.data();
    let kd = kern.data();
    let mut out = vec![F::zero(); n * heads * ho * wo * d];
    for nn in 0..n {
        for b in 0..heads {
            for i in 0..ho {
                for j in 0..wo {
                    let oo = ((((nn * heads) + b) * ho + i) * wo + j) * d;
                    for u in 0..k {
                        for v in 0..k {
                            let kv = kd[(b * k + u) * k + v];
                            let po = ((((nn * heads) + b) * h + (i * stride + u)) * w
                                + (j * stride + v))
                                * d;
                            for dd in 0..d {
                                out[oo + dd] += kv * pd[po + dd];
                            }
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_op(
        vec![n, heads, ho, wo, d],
        out,
        vec![poses.clone(), kern.clone()],
        Box::new(WindowMixGrad { kernel: k, stride }),
    );
    PoseField::new(t)
}

/// Apply the head-shared transforms: `votes[n,i,j,x,y,:] =
/// poses[n,i,x,y,:] @ weights[i,j]`.
pub fn transform_votes<F: Scalar>(
    field: &PoseField<F>,
    bank: &TransformBank<F>,
) -> Result<VoteField<F>, TensorError> {
    if bank.heads != field.heads || bank.dim_in != field.dim {
        return Err(TensorError::ShapeMismatch {
            op: "transform_votes",
            lhs: field.poses.shape().to_vec(),
            rhs: bank.weights.shape().to_vec(),
        });
    }
    let (n, heads, h, w, d) = (
        field.batch(),
        field.heads,
        field.height,
        field.width,
        field.dim,
    );
    let (parents, e) = (bank.parents, bank.dim_out);
    let flat = field
        .poses
        .permute(&[1, 0, 2, 3, 4])?
        .reshape(vec![heads, 1, n * h * w, d])?;
    let votes = flat
        .matmul(&bank.weights)? // [heads, parents, n*h*w, e]
        .reshape(vec![heads, parents, n, h, w, e])?
        .permute(&[2, 0, 1, 3, 4, 5])?;
    VoteField::new(votes)
}

/// Window-mixed convolutional capsule votes: kernel mixing followed by the
/// head-shared transform. Output grid is `(h - k) / s + 1` square.
pub fn conv_capsule_votes<F: Scalar>(
    field: &PoseField<F>,
    kern: &Tensor<F>,
    bank: &TransformBank<F>,
    stride: usize,
) -> Result<VoteField<F>, TensorError> {
    let mixed = window_mix(field, kern, stride)?;
    transform_votes(&mixed, bank)
}

/// Add each capsule's relative grid coordinates (scaled to [0, 1)) to the
/// final two entries of its votes, preserving location information.
pub fn add_coordinates<F: Scalar>(votes: &VoteField<F>) -> Result<VoteField<F>, TensorError> {
    if votes.dim < 2 {
        return Err(TensorError::Invalid {
            op: "add_coordinates",
            msg: format!("vote dim {} < 2", votes.dim),
        });
    }
    let (h, w, d) = (votes.height, votes.width, votes.dim);
    let mut coords = vec![F::zero(); h * w * d];
    for x in 0..h {
        for y in 0..w {
            let base = (x * w + y) * d;
            coords[base + d - 2] = F::cast_from(x as f64 / h as f64);
            coords[base + d - 1] = F::cast_from(y as f64 / w as f64);
        }
    }
    let coords = Tensor::from_vec(vec![1, 1, 1, h, w, d], coords)?;
    VoteField::new(votes.votes.add(&coords)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_zero_vector_stays_zero() {
        let s = T::zeros(vec![4]);
        let out = squash(&s).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squash_unit_norm_gives_half() {
        let s = T::from_vec(vec![4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let out = squash(&s).unwrap();
        assert!((norm(out.data()) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn squash_saturates_below_one() {
        let s = T::from_vec(vec![2], vec![1000.0 / 2f64.sqrt(), 1000.0 / 2f64.sqrt()]).unwrap();
        let n = norm(squash(&s).unwrap().data());
        assert!(n < 1.0);
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn squash_norm_matches_formula() {
        let mut rng = crate::rng::Rng::seed_from(5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..6).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let n2: f64 = v.iter().map(|x| x * x).sum();
            let out = squash(&T::from_vec(vec![6], v).unwrap()).unwrap();
            assert!((norm(out.data()) - n2 / (1.0 + n2)).abs() < 1e-9);
        }
    }

    #[test]
    fn activation_examples() {
        // all-zero pose -> 0; unit-norm pose -> 0.5
        let poses = T::from_vec(
            vec![1, 1, 1, 2, 4],
            vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5],
        )
        .unwrap();
        let field = PoseField::new(poses).unwrap();
        let a = pose_activation(&field).unwrap();
        assert!(a.data()[0].abs() < 1e-12);
        assert!((a.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn activation_monotone_on_ray() {
        let dir = [0.3, -0.4, 0.2, 0.1];
        let mut prev = -1.0;
        for k in 1..10 {
            let v: Vec<f64> = dir.iter().map(|&x| x * k as f64).collect();
            let field = PoseField::new(T::from_vec(vec![1, 1, 1, 1, 4], v).unwrap()).unwrap();
            let a = pose_activation(&field).unwrap().data()[0];
            assert!(a > prev);
            prev = a;
        }
    }

    #[test]
    fn primary_capsule_shapes() {
        // paper-style arithmetic at reduced width: A=64, B=8, d=16 -> 128 channels
        let features = T::zeros(vec![2, 64, 5, 5]);
        let proj = T::zeros(vec![64, 128]);
        let field = primary_capsules(&features, &proj, 8, 16).unwrap();
        assert_eq!(field.poses.shape(), &[2, 8, 5, 5, 16]);
        // zero features with a linear no-bias map give zero poses
        assert!(field.poses.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn primary_capsule_channel_mismatch_rejected() {
        let features = T::zeros(vec![1, 64, 5, 5]);
        let proj = T::zeros(vec![64, 120]); // not 8 * 16
        assert!(primary_capsules(&features, &proj, 8, 16).is_err());
    }

    #[test]
    fn vote_grid_arithmetic() {
        // 28 -> 26 -> 24 under K=3, s=1
        let mut rng = crate::rng::Rng::seed_from(2);
        let poses: Vec<f64> = (0..2 * 28 * 28 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let field =
            PoseField::new(T::from_vec(vec![1, 2, 28, 28, 4], poses).unwrap()).unwrap();
        let kern = T::from_vec(vec![2, 3, 3], vec![0.1; 18]).unwrap();
        let bank =
            TransformBank::new(T::from_vec(vec![2, 3, 4, 4], vec![0.05; 96]).unwrap()).unwrap();
        let v1 = conv_capsule_votes(&field, &kern, &bank, 1).unwrap();
        assert_eq!(v1.votes.shape(), &[1, 2, 3, 26, 26, 4]);

        let p26 = PoseField::new(T::zeros(vec![1, 2, 26, 26, 4])).unwrap();
        let v2 = conv_capsule_votes(&p26, &kern, &bank, 1).unwrap();
        assert_eq!(v2.votes.shape(), &[1, 2, 3, 24, 24, 4]);
    }

    #[test]
    fn unit_kernel_window_is_identity_grid() {
        let field = PoseField::new(T::zeros(vec![1, 2, 7, 5, 4])).unwrap();
        let kern = T::from_vec(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let mixed = window_mix(&field, &kern, 1).unwrap();
        assert_eq!(mixed.poses.shape(), &[1, 2, 7, 5, 4]);
    }

    #[test]
    fn grid_smaller_than_kernel_rejected() {
        let field = PoseField::new(T::zeros(vec![1, 1, 2, 2, 4])).unwrap();
        let kern = T::from_vec(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        assert!(window_mix(&field, &kern, 1).is_err());
    }

    #[test]
    fn votes_linear_in_poses_exactly() {
        // Scaling poses by a power of two scales votes bitwise exactly.
        let mut rng = crate::rng::Rng::seed_from(9);
        let pose_data: Vec<f64> = (0..1 * 2 * 4 * 4 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let doubled: Vec<f64> = pose_data.iter().map(|&v| 2.0 * v).collect();
        let kern_data: Vec<f64> = (0..2 * 9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w_data: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let field = PoseField::new(T::from_vec(vec![1, 2, 4, 4, 4], pose_data).unwrap()).unwrap();
        let field2 = PoseField::new(T::from_vec(vec![1, 2, 4, 4, 4], doubled).unwrap()).unwrap();
        let kern = T::from_vec(vec![2, 3, 3], kern_data).unwrap();
        let bank = TransformBank::new(T::from_vec(vec![2, 2, 4, 4], w_data).unwrap()).unwrap();

        let v1 = conv_capsule_votes(&field, &kern, &bank, 1).unwrap();
        let v2 = conv_capsule_votes(&field2, &kern, &bank, 1).unwrap();
        for (a, b) in v1.votes.data().iter().zip(v2.votes.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn vote_matches_direct_matrix_product() {
        // votes[i,j,x,y,:] = poses[i,x,y,:] @ W[i,j] for a unit window.
        let pose = vec![1.0, 2.0, 3.0, 4.0];
        let field = PoseField::new(T::from_vec(vec![1, 1, 1, 1, 4], pose.clone()).unwrap()).unwrap();
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = (i + 1) as f64; // diag(1,2,3,4)
        }
        let bank = TransformBank::new(T::from_vec(vec![1, 1, 4, 4], w).unwrap()).unwrap();
        let votes = transform_votes(&field, &bank).unwrap();
        assert_eq!(votes.votes.data(), &[1.0, 4.0, 9.0, 16.0]);
    }

    #[test]
    fn coordinates_single_location_nop() {
        let votes = VoteField::new(T::from_vec(vec![1, 1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let out = add_coordinates(&votes).unwrap();
        assert_eq!(out.votes.data(), votes.votes.data());
    }

    #[test]
    fn coordinates_two_by_two_grid() {
        let votes = VoteField::new(T::zeros(vec![1, 1, 1, 2, 2, 4])).unwrap();
        let out = add_coordinates(&votes).unwrap();
        let d = out.votes.data();
        // (x, y) entries land in the last two slots, scaled by 1/2.
        let get = |x: usize, y: usize| {
            let base = (x * 2 + y) * 4;
            (d[base + 2], d[base + 3])
        };
        assert_eq!(get(0, 0), (0.0, 0.0));
        assert_eq!(get(0, 1), (0.0, 0.5));
        assert_eq!(get(1, 0), (0.5, 0.0));
        assert_eq!(get(1, 1), (0.5, 0.5));
    }

    #[test]
    fn coordinates_touch_only_last_two() {
        let mut rng = crate::rng::Rng::seed_from(4);
        let data: Vec<f64> = (0..1 * 2 * 2 * 3 * 3 * 5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let votes = VoteField::new(T::from_vec(vec![1, 2, 2, 3, 3, 5], data.clone()).unwrap()).unwrap();
        let out = add_coordinates(&votes).unwrap();
        for (idx, (a, b)) in data.iter().zip(out.votes.data()).enumerate() {
            if idx % 5 < 3 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn pose_field_requires_square_dim() {
        assert!(PoseField::new(T::zeros(vec![1, 1, 2, 2, 5])).is_err());
        assert!(PoseField::new(T::zeros(vec![1, 1, 2, 2, 9])).is_ok());
    }
}
