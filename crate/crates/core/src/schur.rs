//! Inverse maintenance for symmetric positive definite matrices under
//! removal and addition of rows/columns.
//!
//! Write the matrix with the `k` affected equations first,
//!
//! ```text
//!     V = | E  C' |        V^{-1} = | F  L' |
//!         | C  R  |                 | L  M  |
//! ```
//!
//! Removing the `k` equations gives `R^{-1} = M - L F^{-1} L'`; adding
//! `k` equations with blocks `E` and `C` to a matrix whose inverse is known
//! uses the Schur complement `S = E - C' V^{-1} C`:
//!
//! ```text
//!     V_{+k}^{-1} = | S^{-1}              -S^{-1} C' V^{-1}                 |
//!                   | -V^{-1} C S^{-1}     V^{-1} + V^{-1} C S^{-1} C' V^{-1} |
//! ```
//!
//! Both cost `O(k N^2)` against `O(N^3)` for a fresh inversion.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{relative_asymmetry, spd_inverse, symmetrize};

/// Updates applied to one state before it is recomputed from scratch.
pub const REFRESH_INTERVAL: u32 = 64;
/// Condition number of the removed block above which removal falls back
/// to direct inversion.
pub const CONDITION_LIMIT: f64 = 1e12;

thread_local! {
    static MULTIPLY_ADDS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
fn count_ops(n: usize) {
    MULTIPLY_ADDS.with(|c| c.set(c.get() + n as u64));
}

/// Scalar multiply-adds performed by the update kernels on this thread.
pub fn multiply_adds() -> u64 {
    MULTIPLY_ADDS.with(|c| c.get())
}

pub fn reset_multiply_adds() {
    MULTIPLY_ADDS.with(|c| c.set(0));
}

/// Inverse of `V` over a set of active equations.
///
/// Rows live in storage slots that never move; `ids[i]` and `slots[i]`
/// give the equation id and storage slot at logical position `i`.
#[derive(Debug, Clone)]
pub struct InverseState {
    ids: Vec<usize>,
    slots: Vec<usize>,
    free: Vec<usize>,
    matrix: DMatrix<f64>,
    inv: DMatrix<f64>,
    updates: u32,
    fallbacks: u32,
}

/// Cholesky-based inverse of an SPD matrix. Equation ids are `0..n`.
pub fn direct_inverse(v: &DMatrix<f64>) -> Result<InverseState> {
    InverseState::direct(v, (0..v.nrows()).collect())
}

impl InverseState {
    pub fn empty() -> Self {
        InverseState {
            ids: Vec::new(),
            slots: Vec::new(),
            free: Vec::new(),
            matrix: DMatrix::zeros(0, 0),
            inv: DMatrix::zeros(0, 0),
            updates: 0,
            fallbacks: 0,
        }
    }

    /// Direct inverse with explicit equation ids in row order.
    pub fn direct(v: &DMatrix<f64>, ids: Vec<usize>) -> Result<Self> {
        let n = v.nrows();
        if v.ncols() != n || ids.len() != n {
            return Err(Error::Invalid("matrix must be square and match the id list".into()));
        }
        check_unique(&ids)?;
        let inv = spd_inverse(v).ok_or(Error::NotPositiveDefinite)?;
        Ok(InverseState {
            ids,
            slots: (0..n).collect(),
            free: Vec::new(),
            matrix: symmetrize(v),
            inv,
            updates: 0,
            fallbacks: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Times a removal had to fall back to direct inversion.
    pub fn fallbacks(&self) -> u32 {
        self.fallbacks
    }

    /// `V^{-1}` in logical order.
    pub fn inverse(&self) -> DMatrix<f64> {
        gather(&self.inv, &self.slots)
    }

    /// `V` in logical order.
    pub fn matrix(&self) -> DMatrix<f64> {
        gather(&self.matrix, &self.slots)
    }

    /// `V^{-1}[a, b]` by logical position.
    pub fn inv_at(&self, a: usize, b: usize) -> f64 {
        self.inv[(self.slots[a], self.slots[b])]
    }

    pub fn remove_equations(&self, ids: &[usize]) -> Result<InverseState> {
        let mut next = self.clone();
        next.remove_in_place(ids)?;
        Ok(next)
    }

    pub fn add_equations(&self, new_ids: &[usize], e: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<InverseState> {
        let mut next = self.clone();
        next.add_in_place(new_ids, e, c)?;
        Ok(next)
    }

    pub fn remove_in_place(&mut self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        check_unique(ids)?;
        let mut removed_pos = Vec::with_capacity(ids.len());
        for &id in ids {
            removed_pos.push(self.position(id).ok_or(Error::UnknownEquation(id))?);
        }
        if ids.len() >= self.len() {
            if ids.len() == self.len() {
                *self = InverseState {
                    fallbacks: self.fallbacks,
                    ..InverseState::empty()
                };
                return Ok(());
            }
            return Err(Error::Invalid("cannot remove more equations than are active".into()));
        }
        let removed_slots: Vec<usize> = removed_pos.iter().map(|&p| self.slots[p]).collect();
        let kept_pos: Vec<usize> = (0..self.len()).filter(|p| !removed_pos.contains(p)).collect();
        let kept_slots: Vec<usize> = kept_pos.iter().map(|&p| self.slots[p]).collect();

        let well_conditioned = if removed_slots.len() == 1 {
            self.remove_one(removed_slots[0], &kept_slots)
        } else {
            self.remove_block(&removed_slots, &kept_slots)
        };

        self.ids = kept_pos.iter().map(|&p| self.ids[p]).collect();
        self.slots = kept_slots;
        self.free.extend(removed_slots);

        if !well_conditioned {
            log::warn!("ill-conditioned removal block; recomputing inverse directly");
            self.fallbacks += 1;
            self.refresh()?;
        } else {
            self.after_update()?;
        }
        Ok(())
    }

    /// `k = 1` downdate: `M - l l' / f`. Returns false when `f` is too small
    /// relative to the inverse's scale.
    fn remove_one(&mut self, r: usize, kept: &[usize]) -> bool {
        let f = self.inv[(r, r)];
        let scale = kept.iter().map(|&s| self.inv[(s, s)]).fold(f, f64::max);
        if !(f > 0.0) || scale / f > CONDITION_LIMIT {
            return false;
        }
        let l: Vec<f64> = kept.iter().map(|&s| self.inv[(s, r)]).collect();
        for (a, &sa) in kept.iter().enumerate() {
            let la = l[a] / f;
            for (b, &sb) in kept.iter().enumerate().skip(a) {
                let v = self.inv[(sa, sb)] - la * l[b];
                self.inv[(sa, sb)] = v;
                self.inv[(sb, sa)] = v;
            }
            count_ops(kept.len() - a);
        }
        true
    }

    fn remove_block(&mut self, removed: &[usize], kept: &[usize]) -> bool {
        let k = removed.len();
        let f = DMatrix::from_fn(k, k, |i, j| self.inv[(removed[i], removed[j])]);
        let eig = symmetrize(&f).symmetric_eigenvalues();
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
        if !(lo > 0.0) || hi / lo > CONDITION_LIMIT {
            return false;
        }
        let Some(f_inv) = spd_inverse(&f) else {
            return false;
        };
        let l = DMatrix::from_fn(kept.len(), k, |a, j| self.inv[(kept[a], removed[j])]);
        let x = &l * &f_inv;
        count_ops(kept.len() * k * k);
        for (a, &sa) in kept.iter().enumerate() {
            for (b, &sb) in kept.iter().enumerate().skip(a) {
                let mut v = self.inv[(sa, sb)];
                for j in 0..k {
                    v -= x[(a, j)] * l[(b, j)];
                }
                self.inv[(sa, sb)] = v;
                self.inv[(sb, sa)] = v;
            }
            count_ops((kept.len() - a) * k);
        }
        true
    }

    /// Appends equations `new_ids` with diagonal block `e` (`k x k`) and
    /// cross block `c` (`N x k`, rows in the current logical order).
    pub fn add_in_place(&mut self, new_ids: &[usize], e: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<()> {
        let k = new_ids.len();
        let n = self.len();
        if k == 0 {
            return Ok(());
        }
        if e.nrows() != k || e.ncols() != k || c.nrows() != n || c.ncols() != k {
            return Err(Error::Invalid(format!(
                "augmentation blocks have shape {}x{} and {}x{}, expected {k}x{k} and {n}x{k}",
                e.nrows(),
                e.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        check_unique(new_ids)?;
        if new_ids.iter().any(|id| self.ids.contains(id)) {
            return Err(Error::Invalid("equation id already active".into()));
        }

        // U = V^{-1} C
        let mut u = DMatrix::zeros(n, k);
        for a in 0..n {
            let sa = self.slots[a];
            for j in 0..k {
                let mut acc = 0.0;
                for b in 0..n {
                    acc += self.inv[(sa, self.slots[b])] * c[(b, j)];
                }
                u[(a, j)] = acc;
            }
            count_ops(n * k);
        }
        let s = symmetrize(&(e - c.transpose() * &u));
        count_ops(n * k * k);
        let s_inv = match s.clone().cholesky() {
            Some(ch) => symmetrize(&ch.inverse()),
            None => return Err(Error::RejectedAugmentation),
        };
        let us = &u * &s_inv;
        count_ops(n * k * k);

        let new_slots = self.allocate(k);
        for (a, &sa) in self.slots.iter().enumerate() {
            for (b, &sb) in self.slots.iter().enumerate().skip(a) {
                let mut v = self.inv[(sa, sb)];
                for j in 0..k {
                    v += us[(a, j)] * u[(b, j)];
                }
                self.inv[(sa, sb)] = v;
                self.inv[(sb, sa)] = v;
            }
            count_ops((n - a) * k);
        }
        for (j, &sj) in new_slots.iter().enumerate() {
            for (a, &sa) in self.slots.iter().enumerate() {
                self.inv[(sa, sj)] = -us[(a, j)];
                self.inv[(sj, sa)] = -us[(a, j)];
                self.matrix[(sa, sj)] = c[(a, j)];
                self.matrix[(sj, sa)] = c[(a, j)];
            }
            for (i, &si) in new_slots.iter().enumerate() {
                self.inv[(sj, si)] = s_inv[(j, i)];
                self.matrix[(sj, si)] = 0.5 * (e[(j, i)] + e[(i, j)]);
            }
        }
        self.ids.extend_from_slice(new_ids);
        self.slots.extend(new_slots);
        self.after_update()
    }

    fn allocate(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            match self.free.pop() {
                Some(s) => out.push(s),
                None => break,
            }
        }
        let missing = k - out.len();
        if missing > 0 {
            let cap = self.inv.nrows();
            let new_cap = (cap * 2).max(cap + missing).max(4);
            let mut inv = DMatrix::zeros(new_cap, new_cap);
            let mut matrix = DMatrix::zeros(new_cap, new_cap);
            inv.view_mut((0, 0), (cap, cap)).copy_from(&self.inv);
            matrix.view_mut((0, 0), (cap, cap)).copy_from(&self.matrix);
            self.inv = inv;
            self.matrix = matrix;
            out.extend(cap..cap + missing);
            self.free.extend((cap + missing..new_cap).rev());
        }
        out
    }

    fn after_update(&mut self) -> Result<()> {
        self.updates += 1;
        if self.updates >= REFRESH_INTERVAL {
            self.refresh()?;
        }
        Ok(())
    }

    /// Recomputes the inverse from the stored matrix.
    pub fn refresh(&mut self) -> Result<()> {
        let v = self.matrix();
        let inv = spd_inverse(&v).ok_or(Error::NotPositiveDefinite)?;
        for (a, &sa) in self.slots.iter().enumerate() {
            for (b, &sb) in self.slots.iter().enumerate() {
                self.inv[(sa, sb)] = inv[(a, b)];
            }
        }
        self.updates = 0;
        Ok(())
    }
}

fn gather(m: &DMatrix<f64>, slots: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(slots.len(), slots.len(), |a, b| m[(slots[a], slots[b])])
}

fn check_unique(ids: &[usize]) -> Result<()> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("duplicate equation id".into()));
    }
    Ok(())
}

/// Writes the inverse of `V` with row/column `i` deleted into `out`,
/// given `inv = V^{-1}`. `out` must be `(N-1) x (N-1)`.
pub fn remove_one_into(inv: &DMatrix<f64>, i: usize, out: &mut DMatrix<f64>) {
    let n = inv.nrows();
    let rf = 1.0 / inv[(i, i)];
    let l = inv.column(i);
    let l = l.as_slice();
    // Column-major walk: both matrices are read and written contiguously.
    // `l_a l_b / f` is evaluated as `(l_a l_b) (1/f)`, symmetric in a and b bit for bit.
    for b in 0..n - 1 {
        let ib = if b < i { b } else { b + 1 };
        let lb = l[ib];
        let src = inv.column(ib);
        let src = src.as_slice();
        let mut dst = out.column_mut(b);
        let dst = dst.as_mut_slice();
        let (dst_lo, dst_hi) = dst.split_at_mut(i);
        for ((d, &s), &la) in dst_lo.iter_mut().zip(&src[..i]).zip(&l[..i]) {
            *d = s - la * lb * rf;
        }
        for ((d, &s), &la) in dst_hi.iter_mut().zip(&src[i + 1..]).zip(&l[i + 1..]) {
            *d = s - la * lb * rf;
        }
        count_ops(n - 1);
    }
}

/// Dense `M - L F^{-1} L'` for an arbitrary set of removed positions.
/// Returns the kept positions (ascending) with the reduced inverse, or
/// `None` when the removed block is ill-conditioned.
pub fn remove_positions(inv: &DMatrix<f64>, removed: &[usize]) -> Option<(Vec<usize>, DMatrix<f64>)> {
    let n = inv.nrows();
    let kept: Vec<usize> = (0..n).filter(|p| !removed.contains(p)).collect();
    if removed.is_empty() {
        return Some((kept, inv.clone()));
    }
    let k = removed.len();
    let f = DMatrix::from_fn(k, k, |i, j| inv[(removed[i], removed[j])]);
    let f_inv = if k == 1 {
        let v = f[(0, 0)];
        let scale = kept.iter().map(|&s| inv[(s, s)]).fold(v, f64::max);
        if !(v > 0.0) || scale / v > CONDITION_LIMIT {
            return None;
        }
        DMatrix::from_element(1, 1, 1.0 / v)
    } else {
        let eig = symmetrize(&f).symmetric_eigenvalues();
        let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        if !(lo > 0.0) || hi / lo > CONDITION_LIMIT {
            return None;
        }
        spd_inverse(&f)?
    };
    let l = DMatrix::from_fn(kept.len(), k, |a, j| inv[(kept[a], removed[j])]);
    let x = &l * &f_inv;
    let m = kept.len();
    let mut out = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let mut v = inv[(kept[a], kept[b])];
            for j in 0..k {
                v -= x[(a, j)] * l[(b, j)];
            }
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
        count_ops((m - a) * k);
    }
    Some((kept, out))
}

/// Dense augmentation: inverse of `[[V, c], [c', e]]` with the new
/// equation appended last, given `inv = V^{-1}`. `None` when the Schur
/// complement is not positive.
pub fn append_one(inv: &DMatrix<f64>, c: &[f64], e: f64) -> Option<DMatrix<f64>> {
    let n = inv.nrows();
    let u: Vec<f64> = (0..n)
        .map(|a| (0..n).map(|b| inv[(a, b)] * c[b]).sum::<f64>())
        .collect();
    count_ops(n * n);
    let s = e - c.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>();
    if !(s > 0.0) || !(s > 1e-14 * e.abs()) {
        return None;
    }
    let mut out = DMatrix::zeros(n + 1, n + 1);
    for a in 0..n {
        let ua = u[a] / s;
        for b in a..n {
            let v = inv[(a, b)] + ua * u[b];
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
        out[(a, n)] = -ua;
        out[(n, a)] = -ua;
        count_ops(n - a);
    }
    out[(n, n)] = 1.0 / s;
    Some(out)
}

/// Projected removal of one equation from a GLS information pair.
///
/// With `G = B' V^{-1} B`, `h = B' V^{-1} y`, `q = B' V^{-1} e_i`,
/// `z = (V^{-1} y)_i` and `f = (V^{-1})_{ii}`, dropping equation `i`
/// yields `G - q q' / f` and `h - q z / f`.
pub fn project_removal(g: &mut DMatrix<f64>, h: &mut DVector<f64>, q: &[f64], z: f64, f: f64) {
    let p = q.len();
    for a in 0..p {
        let qa = q[a] / f;
        for b in 0..p {
            g[(a, b)] -= qa * q[b];
        }
        h[a] -= qa * z;
    }
}

/// Projected addition of one equation to a GLS information pair.
///
/// `w = b - B' V^{-1} c` and `s = e - c' V^{-1} c` (the Schur complement);
/// `r = y_new - c' V^{-1} y`. The augmented pair is `G + w w' / s`,
/// `h + w r / s`.
pub fn project_addition(g: &mut DMatrix<f64>, h: &mut DVector<f64>, w: &[f64], r: f64, s: f64) {
    let p = w.len();
    for a in 0..p {
        let wa = w[a] / s;
        for b in 0..p {
            g[(a, b)] += wa * w[b];
        }
        h[a] += wa * r;
    }
}

/// Checks that a result is symmetric to `tol` before symmetrizing it.
pub fn checked_symmetrize(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let asym = relative_asymmetry(m);
    if asym > tol {
        return Err(Error::Invalid(format!("result asymmetric by {asym:e}")));
    }
    Ok(symmetrize(m))
}
