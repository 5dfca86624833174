//! Shape arithmetic: strides, broadcasting, and odometer walks used by the
//! strided kernels. All layouts are row-major.

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides (in elements).
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        s[ax] = acc;
        acc *= shape[ax];
    }
    s
}

/// Broadcast two shapes under right-aligned numpy rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `in_shape` aligned to a broadcast `out_shape`: 0 on axes where
/// the input is broadcast (extent 1 or missing).
pub(crate) fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut s = vec![0; rank];
    for (i, &dim) in in_shape.iter().enumerate() {
        if dim != 1 {
            s[offset + i] = in_strides[i];
        } else {
            debug_assert!(out_shape[offset + i] >= 1);
        }
    }
    s
}

/// Row-major walk over `shape`, calling `f(linear_index, strided_offset)`.
pub(crate) fn walk1(shape: &[usize], s: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..total {
        f(i, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += s[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= s[ax] * shape[ax];
        }
    }
}

/// Row-major walk over `shape` with two strided offsets.
pub(crate) fn walk2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
}

/// Validate a reduction axis list: in range, no duplicates.
pub(crate) fn check_axes(axes: &[usize], rank: usize) -> bool {
    let mut seen = vec![false; rank];
    for &ax in axes {
        if ax >= rank || seen[ax] {
            return false;
        }
        seen[ax] = true;
    }
    true
}

/// Shape after reducing `axes` (keepdim keeps extent-1 axes).
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(shape.len());
    for (ax, &d) in shape.iter().enumerate() {
        if axes.contains(&ax) {
            if keepdim {
                out.push(1);
            }
        } else {
            out.push(d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn walk_covers_all_offsets() {
        let shape = [2, 3];
        let s = strides(&shape);
        let mut seen = Vec::new();
        walk1(&shape, &s, |i, off| {
            assert_eq!(i, off);
            seen.push(off);
        });
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn walk_broadcast_offsets() {
        // [2,3] walked with input shape [3] -> offsets cycle 0,1,2,0,1,2
        let out = [2, 3];
        let bs = broadcast_strides(&out, &[3]);
        let mut offs = Vec::new();
        walk1(&out, &bs, |_, off| offs.push(off));
        assert_eq!(offs, vec![0, 1, 2, 0, 1, 2]);
    }
}
