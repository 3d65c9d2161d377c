//! Empirical `(1 − ε)`-quantile of the delayed constraint values.
//!
//! [`SortedQuantileState`] keeps the delayed values `z` sorted together with the permutation
//! that sorts them, so that replacing a contiguous block of scenarios costs one merge pass
//! over the old sorted array and the sorted block. Nothing here does arithmetic on values:
//! everything is comparisons and copies, so the tracker works for any `Copy + PartialOrd`
//! type, including exact rationals and integers.

use std::fmt::Display;
use std::io::Write;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::problem::check_permutation;

/// 1-based position `⌈S(1 − ε)⌉` of the quantile in the sorted values.
///
/// `S(1 − ε)` is snapped to the nearest integer when within a relative `1e-9` of it, so that
/// e.g. `S = 10, ε = 0.2` gives 8 despite `1 − 0.2` not being exact in binary.
pub fn quantile_index(count: usize, epsilon: f64) -> Result<usize> {
    if count == 0 {
        return Err(Error::Contract("quantile of an empty set".into()));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Domain(format!("ε must lie in [0, 1), got {epsilon}")));
    }
    let target = count as f64 * (1.0 - epsilon);
    let nearest = target.round();
    let idx = if (target - nearest).abs() <= 1e-9 * target.max(1.0) {
        nearest
    } else {
        target.ceil()
    };
    if idx < 1.0 {
        return Err(Error::Domain(format!(
            "ε = {epsilon} leaves no scenario to realize the quantile of {count} values"
        )));
    }
    Ok((idx as usize).min(count))
}

fn is_unordered<V: PartialOrd>(v: &V) -> bool {
    v.partial_cmp(v).is_none()
}

fn reject_unordered<V: PartialOrd>(values: &[V], what: &str) -> Result<()> {
    match values.iter().position(is_unordered) {
        Some(i) => Err(Error::Domain(format!("{what}: value at position {i} is NaN"))),
        None => Ok(()),
    }
}

/// The quantile `q = inf{t : #{i : z_i ≤ t} / S ≥ 1 − ε}` and the smallest scenario index
/// realizing it. Runs in expected linear time.
pub fn naive_quantile<V: Copy + PartialOrd>(values: &[V], epsilon: f64) -> Result<(V, usize)> {
    let index = quantile_index(values.len(), epsilon)?;
    reject_unordered(values, "naive_quantile")?;
    let mut work = values.to_vec();
    let (_, q, _) = work.select_nth_unstable_by(index - 1, |a, b| a.partial_cmp(b).unwrap());
    let q = *q;
    let at = values
        .iter()
        .position(|v| *v == q)
        .ok_or_else(|| Error::Invariant("selected quantile not present in input".into()))?;
    Ok((q, at))
}

/// Fresh constraint values for a contiguous block of scenario slots, sorted on construction.
#[derive(Debug, Clone)]
pub struct MinibatchBlock<V> {
    range: Range<usize>,
    sorted_values: Vec<V>,
    /// `sorted_values[j] = value of slot range.start + order[j]`.
    order: Vec<usize>,
}

impl<V: Copy + PartialOrd> MinibatchBlock<V> {
    /// `values[k]` is the new value of slot `start + k`.
    pub fn new(start: usize, values: &[V]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("minibatch block must not be empty".into()));
        }
        reject_unordered(values, "minibatch values")?;
        let mut order: Vec<usize> = (0..values.len()).collect();
        // stable: equal values keep slot order
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let sorted_values = order.iter().map(|&k| values[k]).collect();
        Ok(Self {
            range: start..start + values.len(),
            sorted_values,
            order,
        })
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn sorted_values(&self) -> &[V] {
        &self.sorted_values
    }

    /// Slot index behind each sorted position.
    pub fn sort_permutation(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().map(move |&k| self.range.start + k)
    }
}

/// Result of one [`SortedQuantileState::merge_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeOutcome<V> {
    pub quantile: V,
    /// Slot whose delayed value realizes the quantile.
    pub quantile_slot: usize,
    /// Loop iterations of the merge; at most `S + block length`.
    pub pass_count: usize,
}

/// Delayed values kept in sorted order.
///
/// Slots are 0-based. `sorted[l] = z[perm[l]]` for every position `l`.
#[derive(Debug, Clone)]
pub struct SortedQuantileState<V> {
    sorted: Vec<V>,
    perm: Vec<usize>,
    epsilon: f64,
    index: usize,
    scratch_sorted: Vec<V>,
    scratch_perm: Vec<usize>,
}

impl<V: Copy + PartialOrd> SortedQuantileState<V> {
    pub fn init_from_values(values: &[V], epsilon: f64) -> Result<Self> {
        let index = quantile_index(values.len(), epsilon)?;
        reject_unordered(values, "initial delayed values")?;
        let mut perm: Vec<usize> = (0..values.len()).collect();
        perm.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let sorted: Vec<V> = perm.iter().map(|&i| values[i]).collect();
        Ok(Self {
            scratch_sorted: sorted.clone(),
            scratch_perm: perm.clone(),
            sorted,
            perm,
            epsilon,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// 1-based quantile position `⌈S(1 − ε)⌉`.
    pub fn quantile_index(&self) -> usize {
        self.index
    }

    pub fn sorted_values(&self) -> &[V] {
        &self.sorted
    }

    pub fn sort_permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn quantile(&self) -> V {
        self.sorted[self.index - 1]
    }

    pub fn quantile_slot(&self) -> usize {
        self.perm[self.index - 1]
    }

    /// Sorted positions holding a value equal to the one at `pos`.
    pub fn tied_positions(&self, pos: usize) -> Range<usize> {
        let v = self.sorted[pos];
        let mut lo = pos;
        while lo > 0 && self.sorted[lo - 1] == v {
            lo -= 1;
        }
        let mut hi = pos + 1;
        while hi < self.sorted.len() && self.sorted[hi] == v {
            hi += 1;
        }
        lo..hi
    }

    /// Reconstructs the unsorted delayed values `z`.
    pub fn delayed_values(&self) -> Vec<V> {
        let mut z = self.sorted.clone();
        for (l, &slot) in self.perm.iter().enumerate() {
            z[slot] = self.sorted[l];
        }
        z
    }

    /// Replaces the delayed values of the block's slots and re-establishes sorted order in a
    /// single merge pass. Old entries are preferred over new ones on equal values.
    pub fn merge_update(&mut self, block: &MinibatchBlock<V>) -> Result<MergeOutcome<V>> {
        let n = self.sorted.len();
        let Range { start: lo, end: hi } = block.range();
        if hi > n {
            return Err(Error::Contract(format!(
                "block {lo}..{hi} exceeds the {n} tracked scenarios"
            )));
        }
        let fresh = block.sorted_values();
        let m = fresh.len();

        let (mut i, mut j, mut l, mut passes) = (0usize, 0usize, 0usize, 0usize);
        while i < n || j < m {
            passes += 1;
            if i < n {
                let slot = self.perm[i];
                if slot >= lo && slot < hi {
                    // replaced by the block, drop it
                    i += 1;
                    continue;
                }
            }
            if l == n {
                return Err(Error::Invariant(
                    "merge produced more entries than scenarios; permutation is corrupt".into(),
                ));
            }
            let take_old = j == m || (i < n && self.sorted[i] <= fresh[j]);
            if take_old {
                self.scratch_sorted[l] = self.sorted[i];
                self.scratch_perm[l] = self.perm[i];
                i += 1;
            } else {
                self.scratch_sorted[l] = fresh[j];
                self.scratch_perm[l] = lo + block.order[j];
                j += 1;
            }
            l += 1;
        }
        if l != n {
            return Err(Error::Invariant(format!(
                "merge produced {l} entries for {n} scenarios; permutation is corrupt"
            )));
        }
        std::mem::swap(&mut self.sorted, &mut self.scratch_sorted);
        std::mem::swap(&mut self.perm, &mut self.scratch_perm);
        Ok(MergeOutcome {
            quantile: self.quantile(),
            quantile_slot: self.quantile_slot(),
            pass_count: passes,
        })
    }

    /// Renames slots so that the new slot `i` holds what was slot `theta[i]`.
    ///
    /// Sorted values are untouched; the permutation becomes `θ⁻¹ ∘ π`. Whoever owns the
    /// scenarios must apply the same relabeling to them.
    pub fn shuffle_relabel(&mut self, theta: &[usize]) -> Result<()> {
        check_permutation(theta, self.len())?;
        let mut inverse = vec![0usize; theta.len()];
        for (new, &old) in theta.iter().enumerate() {
            inverse[old] = new;
        }
        for p in &mut self.perm {
            *p = inverse[*p];
        }
        Ok(())
    }

    /// Verifies sortedness and that the permutation is a bijection.
    pub fn check_invariants(&self) -> Result<()> {
        if self.sorted.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Invariant("sorted values are not nondecreasing".into()));
        }
        check_permutation(&self.perm, self.sorted.len())
            .map_err(|e| Error::Invariant(format!("sort permutation: {e}")))
    }
}

impl<V: Copy + PartialOrd + Display> SortedQuantileState<V> {
    /// Debug dump as CSV with columns `scenario,delayed_value,sorted_position`, one row per
    /// scenario in slot order.
    pub fn write_debug_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut position = vec![0usize; self.len()];
        for (l, &slot) in self.perm.iter().enumerate() {
            position[slot] = l;
        }
        let mut w = csv::Writer::from_writer(out);
        let fmt_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["scenario", "delayed_value", "sorted_position"])
            .map_err(fmt_err)?;
        for (slot, &pos) in position.iter().enumerate() {
            w.write_record(&[slot.to_string(), self.sorted[pos].to_string(), pos.to_string()])
                .map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}
