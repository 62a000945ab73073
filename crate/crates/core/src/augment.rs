//! Signal-subset dataset expansion, virtual signal fills, and batch mixing.
//!
//! A dataset with signals `{p, c, n}` expands into one variant per signal
//! subset, each registered as its own domain. Channels missing from a cloud
//! can be filled with a single constant per channel ("virtual" signals), so
//! every pairwise difference on those channels is exactly zero and lookup
//! encodings touch only the zero-delta bin.

use crate::error::{Error, Result};
use crate::scene::{PointCloud, SignalMask};

/// Constant fill for virtual color channels; the midpoint of the color range
/// so zero deltas land in the symmetric quantizer's center bin.
pub const VIRTUAL_COLOR: [f64; 3] = [0.5, 0.5, 0.5];
/// Constant fill for virtual normals: the canonical axis.
pub const VIRTUAL_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

/// One signal-subset variant of a base dataset, bound to a domain id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceDescriptor {
    pub dataset: String,
    pub mask: SignalMask,
    pub domain_id: usize,
}

/// Assigns consecutive domain ids to dataset variants.
#[derive(Clone, Debug, Default)]
pub struct DomainRegistry {
    sources: Vec<SourceDescriptor>,
}

impl DomainRegistry {
    pub fn new() -> Self {
        DomainRegistry::default()
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn sources(&self) -> &[SourceDescriptor] {
        &self.sources
    }

    /// Registers one variant per subset, in the given order, and returns the
    /// newly added descriptors. Every subset must be expressible from the
    /// base mask.
    pub fn augment(
        &mut self,
        dataset: &str,
        base_mask: SignalMask,
        subsets: &[SignalMask],
    ) -> Result<&[SourceDescriptor]> {
        for subset in subsets {
            if !subset.is_subset_of(base_mask) {
                return Err(Error::Subset(format!(
                    "subset '{}' is not available in dataset '{dataset}' with mask '{}'",
                    subset.label(),
                    base_mask.label()
                )));
            }
        }
        let start = self.sources.len();
        for subset in subsets {
            self.sources.push(SourceDescriptor {
                dataset: dataset.to_string(),
                mask: *subset,
                domain_id: self.sources.len(),
            });
        }
        Ok(&self.sources[start..])
    }
}

/// The subsets of `base` containing position, in the canonical order
/// `{p}, {p,c}, {p,n}, {p,c,n}` restricted to the available signals.
pub fn default_subsets(base: SignalMask) -> Vec<SignalMask> {
    let mut out = vec![SignalMask::POSITION];
    if base.color {
        out.push(SignalMask::new(true, false));
    }
    if base.normal {
        out.push(SignalMask::new(false, true));
    }
    if base.color && base.normal {
        out.push(SignalMask::FULL);
    }
    out
}

/// Fills the channels of `target` missing from the cloud with the constant
/// virtual values; existing channels are preserved bitwise.
pub fn virtualize_signals(pc: &PointCloud, target: SignalMask) -> Result<PointCloud> {
    if !pc.signal_mask().is_subset_of(target) {
        return Err(Error::Mask(format!(
            "target mask '{}' does not contain the cloud's mask '{}'; project instead",
            target.label(),
            pc.signal_mask().label()
        )));
    }
    let points = pc
        .points()
        .iter()
        .map(|p| {
            let mut q = p.clone();
            if target.color && q.color.is_none() {
                q.color = Some(VIRTUAL_COLOR);
            }
            if target.normal && q.normal.is_none() {
                q.normal = Some(VIRTUAL_NORMAL);
            }
            q
        })
        .collect();
    let mut out = PointCloud::new(points, target)?;
    out.domain_id = pc.domain_id;
    Ok(out)
}

/// Drops the channels outside `target`; positions are untouched.
pub fn project_signals(pc: &PointCloud, target: SignalMask) -> Result<PointCloud> {
    if !target.is_subset_of(pc.signal_mask()) {
        return Err(Error::Mask(format!(
            "target mask '{}' is not a subset of the cloud's mask '{}'",
            target.label(),
            pc.signal_mask().label()
        )));
    }
    let points = pc
        .points()
        .iter()
        .map(|p| {
            let mut q = p.clone();
            if !target.color {
                q.color = None;
            }
            if !target.normal {
                q.normal = None;
            }
            q
        })
        .collect();
    let mut out = PointCloud::new(points, target)?;
    out.domain_id = pc.domain_id;
    Ok(out)
}

/// A repeating batch-source cycle honoring integer ratios. Within a cycle,
/// sources are ordered by descending ratio, ties by ascending source id, and
/// each emits its ratio's worth of consecutive batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixSchedule {
    cycle: Vec<usize>,
}

impl MixSchedule {
    pub fn new(ratios: &[(usize, usize)]) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Config("mix schedule needs at least one source".into()));
        }
        if ratios.iter().any(|&(_, r)| r == 0) {
            return Err(Error::Range("mix ratios must be positive".into()));
        }
        let mut ordered = ratios.to_vec();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut cycle = Vec::with_capacity(ordered.iter().map(|&(_, r)| r).sum());
        for (source, ratio) in ordered {
            for _ in 0..ratio {
                cycle.push(source);
            }
        }
        Ok(MixSchedule { cycle })
    }

    pub fn cycle(&self) -> &[usize] {
        &self.cycle
    }

    pub fn cycle_len(&self) -> usize {
        self.cycle.len()
    }

    /// The source of batch `index`.
    pub fn source_of(&self, index: usize) -> usize {
        self.cycle[index % self.cycle.len()]
    }

    /// The first `count` batch sources.
    pub fn batches(&self, count: usize) -> impl Iterator<Item = usize> + '_ {
        (0..count).map(move |i| self.source_of(i))
    }
}
