//! Trainable lookup-table encodings of quantized relative signal changes.
//!
//! A signal difference between two voxels is a vector of `M` components
//! (three per signal family: position, color, normal). Each attention role
//! (query, key, value) owns tables that map the quantized difference to a
//! `d`-dimensional bias vector. Four table layouts are supported:
//!
//! * `Base` — one 1D table per component; the encoding is the sum of the
//!   indexed rows.
//! * `DomainModulated` — the base layout plus per-domain scalar tables that
//!   multiply each summand.
//! * `Vm` — per signal group (triplet of components), three 1D vector tables
//!   and three 2D matrix tables combined by cyclic elementwise products, a
//!   vector-matrix factorization of the full per-group 3D table.
//! * `VmDomainModulated` — the factorized layout with per-domain scalars on
//!   every 1D and 2D factor.

pub mod serial;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;

/// Components per signal group (x/y/z, r/g/b, nx/ny/nz).
pub const SIGNAL_GROUP_SIZE: usize = 3;

/// Variance of the Gaussian used to initialize shared table entries.
pub const INIT_VARIANCE: f64 = 0.02;

/// Table layout variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableMode {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "domain-modulated")]
    DomainModulated,
    #[serde(rename = "vm")]
    Vm,
    #[serde(rename = "vm-domain-modulated")]
    VmDomainModulated,
}

impl TableMode {
    pub const ALL: [TableMode; 4] = [
        TableMode::Base,
        TableMode::DomainModulated,
        TableMode::Vm,
        TableMode::VmDomainModulated,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TableMode::Base => "base",
            TableMode::DomainModulated => "domain-modulated",
            TableMode::Vm => "vm",
            TableMode::VmDomainModulated => "vm-domain-modulated",
        }
    }

    pub fn is_factorized(self) -> bool {
        matches!(self, TableMode::Vm | TableMode::VmDomainModulated)
    }

    pub fn is_domain_modulated(self) -> bool {
        matches!(self, TableMode::DomainModulated | TableMode::VmDomainModulated)
    }
}

impl fmt::Display for TableMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for TableMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(TableMode::Base),
            "domain-modulated" | "dm" => Ok(TableMode::DomainModulated),
            "vm" => Ok(TableMode::Vm),
            "vm-domain-modulated" | "vm-dm" => Ok(TableMode::VmDomainModulated),
            other => Err(Error::Config(format!("unknown table mode '{other}'"))),
        }
    }
}

/// Attention roles that own independent tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableRole {
    Query,
    Key,
    Value,
}

impl TableRole {
    pub const ALL: [TableRole; 3] = [TableRole::Query, TableRole::Key, TableRole::Value];

    pub fn index(self) -> usize {
        match self {
            TableRole::Query => 0,
            TableRole::Key => 1,
            TableRole::Value => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TableRole::Query => "q",
            TableRole::Key => "k",
            TableRole::Value => "v",
        }
    }
}

/// Per-component quantization bounds plus division counts for the 1D and 2D
/// tables.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    pub divisions_1d: usize,
    pub divisions_2d: usize,
}

/// A signal difference quantized against both division counts.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedDelta {
    /// Bin per component under `divisions_1d`.
    pub bins_1d: Vec<usize>,
    /// Bin per component under `divisions_2d`.
    pub bins_2d: Vec<usize>,
}

impl QuantizerSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, divisions_1d: usize, divisions_2d: usize) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Shape(format!(
                "{} lower bounds vs {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        if divisions_1d < 2 || divisions_2d < 2 {
            return Err(Error::Range("division counts must be at least 2".into()));
        }
        for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Range(format!(
                    "component {i}: invalid bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(QuantizerSpec {
            lower,
            upper,
            divisions_1d,
            divisions_2d,
        })
    }

    /// Bounds for the nine-component signal vector of in-window voxel pairs:
    /// position differences span `±(window_size - 1) * voxel_size` per axis,
    /// color differences `±1`, normal component differences `±2`.
    pub fn for_signals(
        window_size: usize,
        voxel_size: f64,
        divisions_1d: usize,
        divisions_2d: usize,
    ) -> Self {
        let pos = (window_size.max(1) - 1).max(1) as f64 * voxel_size;
        let lower = vec![-pos, -pos, -pos, -1.0, -1.0, -1.0, -2.0, -2.0, -2.0];
        let upper = vec![pos, pos, pos, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        QuantizerSpec::new(lower, upper, divisions_1d, divisions_2d)
            .expect("signal bounds are valid by construction")
    }

    pub fn components(&self) -> usize {
        self.lower.len()
    }

    pub fn bounds(&self, component: usize) -> (f64, f64) {
        (self.lower[component], self.upper[component])
    }

    fn bin_of(value: f64, lo: f64, hi: f64, divisions: usize) -> usize {
        let t = divisions as f64;
        let x = ((value - lo) / (hi - lo) * t).floor();
        if x < 0.0 {
            0
        } else if x >= t {
            divisions - 1
        } else {
            x as usize
        }
    }

    /// Quantizes one component under the given division count.
    pub fn bin(&self, component: usize, value: f64, divisions: usize) -> usize {
        Self::bin_of(value, self.lower[component], self.upper[component], divisions)
    }

    /// Center of a bin, which re-quantizes to the same bin.
    pub fn bin_center(&self, component: usize, bin: usize, divisions: usize) -> f64 {
        let (lo, hi) = self.bounds(component);
        lo + (bin as f64 + 0.5) * (hi - lo) / divisions as f64
    }

    /// Quantizes a full delta vector against both division counts.
    /// Out-of-range components clamp to the boundary bins.
    pub fn quantize(&self, delta: &[f64]) -> Result<QuantizedDelta> {
        if delta.len() != self.components() {
            return Err(Error::Shape(format!(
                "delta has {} components, spec has {}",
                delta.len(),
                self.components()
            )));
        }
        let mut bins_1d = Vec::with_capacity(delta.len());
        let mut bins_2d = Vec::with_capacity(delta.len());
        for (i, &v) in delta.iter().enumerate() {
            bins_1d.push(self.bin(i, v, self.divisions_1d));
            bins_2d.push(self.bin(i, v, self.divisions_2d));
        }
        Ok(QuantizedDelta { bins_1d, bins_2d })
    }
}

/// A 1D table: `divisions` rows of `dim`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Table1d {
    pub rows: Vec<Vec<f64>>,
}

impl Table1d {
    fn zeros(divisions: usize, dim: usize) -> Self {
        Table1d {
            rows: vec![vec![0.0; dim]; divisions],
        }
    }
}

/// A 2D table: `divisions^2` rows of `dim`-vectors, row index `a * divisions + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table2d {
    pub divisions: usize,
    pub rows: Vec<Vec<f64>>,
}

impl Table2d {
    fn zeros(divisions: usize, dim: usize) -> Self {
        Table2d {
            divisions,
            rows: vec![vec![0.0; dim]; divisions * divisions],
        }
    }

    #[inline]
    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        &self.rows[a * self.divisions + b]
    }
}

/// The full set of encoding tables for all three roles, in one of the four
/// layouts. Freshly constructed sets are zero; call [`LookupTableSet::init`]
/// for the documented random initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTableSet {
    mode: TableMode,
    dim: usize,
    components: usize,
    domains: usize,
    divisions_1d: usize,
    divisions_2d: usize,
    /// `[role][component]`, base and domain-modulated layouts.
    shared: Vec<Vec<Table1d>>,
    /// `[role][domain][component][bin]`, domain-modulated layout.
    shared_scalars: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[role][group][axis]`, factorized layouts.
    vm_vectors: Vec<Vec<Vec<Table1d>>>,
    /// `[role][group][axis]`, factorized layouts.
    vm_matrices: Vec<Vec<Vec<Table2d>>>,
    /// `[role][domain][group][axis][bin]`, factorized domain-modulated layout.
    vm_vector_scalars: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `[role][domain][group][axis][pair]`, factorized domain-modulated layout.
    vm_matrix_scalars: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

/// Closed-form count of domain-modulation scalars across the three roles.
pub fn modulation_param_count(
    mode: TableMode,
    components: usize,
    domains: usize,
    divisions_1d: usize,
    divisions_2d: usize,
) -> usize {
    match mode {
        TableMode::Base | TableMode::Vm => 0,
        TableMode::DomainModulated => 3 * components * domains * divisions_1d,
        TableMode::VmDomainModulated => {
            let groups = components / SIGNAL_GROUP_SIZE;
            3 * domains
                * groups
                * (SIGNAL_GROUP_SIZE * divisions_1d
                    + SIGNAL_GROUP_SIZE * divisions_2d * divisions_2d)
        }
    }
}

impl LookupTableSet {
    pub fn new(
        mode: TableMode,
        dim: usize,
        components: usize,
        domains: usize,
        divisions_1d: usize,
        divisions_2d: usize,
    ) -> Result<Self> {
        if dim == 0 || components == 0 {
            return Err(Error::Shape("dim and components must be positive".into()));
        }
        if divisions_1d < 2 || divisions_2d < 2 {
            return Err(Error::Range("division counts must be at least 2".into()));
        }
        if mode.is_domain_modulated() && domains == 0 {
            return Err(Error::Config(
                "domain-modulated tables need at least one domain".into(),
            ));
        }
        if mode.is_factorized() && components % SIGNAL_GROUP_SIZE != 0 {
            return Err(Error::Shape(format!(
                "factorized tables need component count divisible by {SIGNAL_GROUP_SIZE}, got {components}"
            )));
        }
        let groups = components / SIGNAL_GROUP_SIZE;
        let mut set = LookupTableSet {
            mode,
            dim,
            components,
            domains,
            divisions_1d,
            divisions_2d,
            shared: Vec::new(),
            shared_scalars: Vec::new(),
            vm_vectors: Vec::new(),
            vm_matrices: Vec::new(),
            vm_vector_scalars: Vec::new(),
            vm_matrix_scalars: Vec::new(),
        };
        match mode {
            TableMode::Base | TableMode::DomainModulated => {
                set.shared = (0..3)
                    .map(|_| (0..components).map(|_| Table1d::zeros(divisions_1d, dim)).collect())
                    .collect();
                if mode == TableMode::DomainModulated {
                    set.shared_scalars = (0..3)
                        .map(|_| {
                            (0..domains)
                                .map(|_| vec![vec![0.0; divisions_1d]; components])
                                .collect()
                        })
                        .collect();
                }
            }
            TableMode::Vm | TableMode::VmDomainModulated => {
                set.vm_vectors = (0..3)
                    .map(|_| {
                        (0..groups)
                            .map(|_| {
                                (0..SIGNAL_GROUP_SIZE)
                                    .map(|_| Table1d::zeros(divisions_1d, dim))
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                set.vm_matrices = (0..3)
                    .map(|_| {
                        (0..groups)
                            .map(|_| {
                                (0..SIGNAL_GROUP_SIZE)
                                    .map(|_| Table2d::zeros(divisions_2d, dim))
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                if mode == TableMode::VmDomainModulated {
                    set.vm_vector_scalars = (0..3)
                        .map(|_| {
                            (0..domains)
                                .map(|_| {
                                    (0..groups)
                                        .map(|_| vec![vec![0.0; divisions_1d]; SIGNAL_GROUP_SIZE])
                                        .collect()
                                })
                                .collect()
                        })
                        .collect();
                    set.vm_matrix_scalars = (0..3)
                        .map(|_| {
                            (0..domains)
                                .map(|_| {
                                    (0..groups)
                                        .map(|_| {
                                            vec![
                                                vec![0.0; divisions_2d * divisions_2d];
                                                SIGNAL_GROUP_SIZE
                                            ]
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect();
                }
            }
        }
        Ok(set)
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn divisions_1d(&self) -> usize {
        self.divisions_1d
    }

    pub fn divisions_2d(&self) -> usize {
        self.divisions_2d
    }

    pub fn groups(&self) -> usize {
        self.components / SIGNAL_GROUP_SIZE
    }

    /// A zero-valued set with identical shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        LookupTableSet::new(
            self.mode,
            self.dim,
            self.components,
            self.domains,
            self.divisions_1d,
            self.divisions_2d,
        )
        .expect("shapes already validated")
    }

    fn expect_mode(&self, expected: TableMode) -> Result<()> {
        if self.mode != expected {
            return Err(Error::Mode {
                expected: expected.label().into(),
                actual: self.mode.label().into(),
            });
        }
        Ok(())
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.domains {
            return Err(Error::Domain {
                domain,
                count: self.domains,
            });
        }
        Ok(())
    }

    fn check_bins_1d(&self, bins: &[usize]) -> Result<()> {
        if bins.len() != self.components {
            return Err(Error::Shape(format!(
                "{} bins for {} components",
                bins.len(),
                self.components
            )));
        }
        if bins.iter().any(|&b| b >= self.divisions_1d) {
            return Err(Error::Range("1D bin out of range".into()));
        }
        Ok(())
    }

    fn check_quantized(&self, q: &QuantizedDelta) -> Result<()> {
        self.check_bins_1d(&q.bins_1d)?;
        if q.bins_2d.len() != self.components {
            return Err(Error::Shape(format!(
                "{} 2D bins for {} components",
                q.bins_2d.len(),
                self.components
            )));
        }
        if q.bins_2d.iter().any(|&b| b >= self.divisions_2d) {
            return Err(Error::Range("2D bin out of range".into()));
        }
        Ok(())
    }

    /// Initializes shared entries from `Normal(0, INIT_VARIANCE)` and all
    /// modulation scalars to 1, deterministically for a fixed seed. Sets
    /// sharing a layout consume identical draws for identical seeds, so a
    /// base set and a domain-modulated set seeded alike hold the same shared
    /// entries.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_with_rng(&mut rng);
    }

    pub fn init_with_rng(&mut self, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, INIT_VARIANCE.sqrt()).expect("valid normal");
        for role_tables in &mut self.shared {
            for table in role_tables {
                for row in &mut table.rows {
                    for v in row.iter_mut() {
                        *v = rng.sample(normal);
                    }
                }
            }
        }
        for role_tables in &mut self.vm_vectors {
            for group in role_tables {
                for table in group {
                    for row in &mut table.rows {
                        for v in row.iter_mut() {
                            *v = rng.sample(normal);
                        }
                    }
                }
            }
        }
        for role_tables in &mut self.vm_matrices {
            for group in role_tables {
                for table in group {
                    for row in &mut table.rows {
                        for v in row.iter_mut() {
                            *v = rng.sample(normal);
                        }
                    }
                }
            }
        }
        for role in &mut self.shared_scalars {
            for domain in role {
                for comp in domain {
                    comp.fill(1.0);
                }
            }
        }
        for role in &mut self.vm_vector_scalars {
            for domain in role {
                for group in domain {
                    for axis in group {
                        axis.fill(1.0);
                    }
                }
            }
        }
        for role in &mut self.vm_matrix_scalars {
            for domain in role {
                for group in domain {
                    for axis in group {
                        axis.fill(1.0);
                    }
                }
            }
        }
    }

    /// Base layout: sum of the indexed 1D rows over all components.
    pub fn base_encoding(&self, role: TableRole, bins_1d: &[usize]) -> Result<Vec<f64>> {
        self.expect_mode(TableMode::Base)?;
        self.check_bins_1d(bins_1d)?;
        let tables = &self.shared[role.index()];
        let mut out = vec![0.0; self.dim];
        for (m, &bin) in bins_1d.iter().enumerate() {
            let row = &tables[m].rows[bin];
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Domain-modulated layout: each summand is scaled by the domain's
    /// scalar for the same component and bin.
    pub fn domain_modulated_encoding(
        &self,
        role: TableRole,
        bins_1d: &[usize],
        domain: usize,
    ) -> Result<Vec<f64>> {
        self.expect_mode(TableMode::DomainModulated)?;
        self.check_domain(domain)?;
        self.check_bins_1d(bins_1d)?;
        let tables = &self.shared[role.index()];
        let scalars = &self.shared_scalars[role.index()][domain];
        let mut out = vec![0.0; self.dim];
        for (m, &bin) in bins_1d.iter().enumerate() {
            let s = scalars[m][bin];
            let row = &tables[m].rows[bin];
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += s * v;
            }
        }
        Ok(out)
    }

    #[inline]
    fn group_bins(q: &QuantizedDelta, group: usize) -> ([usize; 3], [usize; 3]) {
        let base = group * SIGNAL_GROUP_SIZE;
        (
            [q.bins_1d[base], q.bins_1d[base + 1], q.bins_1d[base + 2]],
            [q.bins_2d[base], q.bins_2d[base + 1], q.bins_2d[base + 2]],
        )
    }

    /// One group's factorized contribution: the sum over the three cyclic
    /// terms of the elementwise product between the axis vector row and the
    /// complementary-plane matrix row.
    pub fn vm_group_encoding(
        &self,
        role: TableRole,
        group: usize,
        q: &QuantizedDelta,
    ) -> Result<Vec<f64>> {
        if !self.mode.is_factorized() {
            return Err(Error::Mode {
                expected: TableMode::Vm.label().into(),
                actual: self.mode.label().into(),
            });
        }
        self.check_quantized(q)?;
        let (b1, b2) = Self::group_bins(q, group);
        let vectors = &self.vm_vectors[role.index()][group];
        let matrices = &self.vm_matrices[role.index()][group];
        let mut out = vec![0.0; self.dim];
        for axis in 0..SIGNAL_GROUP_SIZE {
            let vec_row = &vectors[axis].rows[b1[axis]];
            let mat_row = matrices[axis].row(b2[(axis + 1) % 3], b2[(axis + 2) % 3]);
            for ((o, &v), &m) in out.iter_mut().zip(vec_row.iter()).zip(mat_row.iter()) {
                *o += v * m;
            }
        }
        Ok(out)
    }

    /// Factorized layout: sum of the per-group contributions.
    pub fn vm_encoding(&self, role: TableRole, q: &QuantizedDelta) -> Result<Vec<f64>> {
        self.expect_mode(TableMode::Vm)?;
        self.check_quantized(q)?;
        let mut out = vec![0.0; self.dim];
        for group in 0..self.groups() {
            let contrib = self.vm_group_encoding(role, group, q)?;
            for (o, &v) in out.iter_mut().zip(contrib.iter()) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// One group's domain-modulated factorized contribution: every 1D and 2D
    /// factor is scaled by its domain scalar before the product.
    pub fn vm_domain_modulated_group_encoding(
        &self,
        role: TableRole,
        group: usize,
        q: &QuantizedDelta,
        domain: usize,
    ) -> Result<Vec<f64>> {
        self.expect_mode(TableMode::VmDomainModulated)?;
        self.check_domain(domain)?;
        self.check_quantized(q)?;
        let (b1, b2) = Self::group_bins(q, group);
        let vectors = &self.vm_vectors[role.index()][group];
        let matrices = &self.vm_matrices[role.index()][group];
        let vec_scalars = &self.vm_vector_scalars[role.index()][domain][group];
        let mat_scalars = &self.vm_matrix_scalars[role.index()][domain][group];
        let mut out = vec![0.0; self.dim];
        for axis in 0..SIGNAL_GROUP_SIZE {
            let (pa, pb) = (b2[(axis + 1) % 3], b2[(axis + 2) % 3]);
            let sv = vec_scalars[axis][b1[axis]];
            let sm = mat_scalars[axis][pa * self.divisions_2d + pb];
            let vec_row = &vectors[axis].rows[b1[axis]];
            let mat_row = matrices[axis].row(pa, pb);
            for ((o, &v), &m) in out.iter_mut().zip(vec_row.iter()).zip(mat_row.iter()) {
                *o += (sv * v) * (sm * m);
            }
        }
        Ok(out)
    }

    /// Domain-modulated factorized layout: sum of the per-group contributions.
    pub fn vm_domain_modulated_encoding(
        &self,
        role: TableRole,
        q: &QuantizedDelta,
        domain: usize,
    ) -> Result<Vec<f64>> {
        self.expect_mode(TableMode::VmDomainModulated)?;
        self.check_domain(domain)?;
        self.check_quantized(q)?;
        let mut out = vec![0.0; self.dim];
        for group in 0..self.groups() {
            let contrib = self.vm_domain_modulated_group_encoding(role, group, q, domain)?;
            for (o, &v) in out.iter_mut().zip(contrib.iter()) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Mode-dispatching evaluation. `domain` is ignored by the unmodulated
    /// layouts.
    pub fn encode(&self, role: TableRole, q: &QuantizedDelta, domain: usize) -> Result<Vec<f64>> {
        match self.mode {
            TableMode::Base => self.base_encoding(role, &q.bins_1d),
            TableMode::DomainModulated => self.domain_modulated_encoding(role, &q.bins_1d, domain),
            TableMode::Vm => self.vm_encoding(role, q),
            TableMode::VmDomainModulated => self.vm_domain_modulated_encoding(role, q, domain),
        }
    }

    /// Accumulates `d(loss)/d(entry)` into `grads` (a `zeros_like` clone of
    /// `self`) given `upstream = d(loss)/d(encoding)` for one evaluation.
    pub fn accumulate_encoding_grad(
        &self,
        role: TableRole,
        q: &QuantizedDelta,
        domain: usize,
        upstream: &[f64],
        grads: &mut LookupTableSet,
    ) -> Result<()> {
        if upstream.len() != self.dim {
            return Err(Error::Shape(format!(
                "upstream has {} channels, tables have {}",
                upstream.len(),
                self.dim
            )));
        }
        let r = role.index();
        match self.mode {
            TableMode::Base => {
                self.check_bins_1d(&q.bins_1d)?;
                for (m, &bin) in q.bins_1d.iter().enumerate() {
                    let g = &mut grads.shared[r][m].rows[bin];
                    for (gv, &u) in g.iter_mut().zip(upstream.iter()) {
                        *gv += u;
                    }
                }
            }
            TableMode::DomainModulated => {
                self.check_domain(domain)?;
                self.check_bins_1d(&q.bins_1d)?;
                for (m, &bin) in q.bins_1d.iter().enumerate() {
                    let s = self.shared_scalars[r][domain][m][bin];
                    let row = &self.shared[r][m].rows[bin];
                    let g = &mut grads.shared[r][m].rows[bin];
                    for (gv, &u) in g.iter_mut().zip(upstream.iter()) {
                        *gv += s * u;
                    }
                    grads.shared_scalars[r][domain][m][bin] += dot(upstream, row);
                }
            }
            TableMode::Vm => {
                self.check_quantized(q)?;
                for group in 0..self.groups() {
                    let (b1, b2) = Self::group_bins(q, group);
                    for axis in 0..SIGNAL_GROUP_SIZE {
                        let (pa, pb) = (b2[(axis + 1) % 3], b2[(axis + 2) % 3]);
                        let vec_row = self.vm_vectors[r][group][axis].rows[b1[axis]].clone();
                        let mat_row = self.vm_matrices[r][group][axis].row(pa, pb).to_vec();
                        let gv = &mut grads.vm_vectors[r][group][axis].rows[b1[axis]];
                        for ((g, &u), &m) in gv.iter_mut().zip(upstream.iter()).zip(mat_row.iter())
                        {
                            *g += u * m;
                        }
                        let gm = &mut grads.vm_matrices[r][group][axis].rows
                            [pa * self.divisions_2d + pb];
                        for ((g, &u), &v) in gm.iter_mut().zip(upstream.iter()).zip(vec_row.iter())
                        {
                            *g += u * v;
                        }
                    }
                }
            }
            TableMode::VmDomainModulated => {
                self.check_domain(domain)?;
                self.check_quantized(q)?;
                for group in 0..self.groups() {
                    let (b1, b2) = Self::group_bins(q, group);
                    for axis in 0..SIGNAL_GROUP_SIZE {
                        let (pa, pb) = (b2[(axis + 1) % 3], b2[(axis + 2) % 3]);
                        let pair = pa * self.divisions_2d + pb;
                        let sv = self.vm_vector_scalars[r][domain][group][axis][b1[axis]];
                        let sm = self.vm_matrix_scalars[r][domain][group][axis][pair];
                        let vec_row = self.vm_vectors[r][group][axis].rows[b1[axis]].clone();
                        let mat_row = self.vm_matrices[r][group][axis].row(pa, pb).to_vec();
                        let gv = &mut grads.vm_vectors[r][group][axis].rows[b1[axis]];
                        for ((g, &u), &m) in gv.iter_mut().zip(upstream.iter()).zip(mat_row.iter())
                        {
                            *g += u * sv * sm * m;
                        }
                        let gm = &mut grads.vm_matrices[r][group][axis].rows[pair];
                        for ((g, &u), &v) in gm.iter_mut().zip(upstream.iter()).zip(vec_row.iter())
                        {
                            *g += u * sv * sm * v;
                        }
                        let mut dv = 0.0;
                        let mut dm = 0.0;
                        for ((&u, &v), &m) in
                            upstream.iter().zip(vec_row.iter()).zip(mat_row.iter())
                        {
                            dv += u * v * sm * m;
                            dm += u * sv * v * m;
                        }
                        grads.vm_vector_scalars[r][domain][group][axis][b1[axis]] += dv;
                        grads.vm_matrix_scalars[r][domain][group][axis][pair] += dm;
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of stored modulation scalars.
    pub fn modulation_entry_count(&self) -> usize {
        let mut n = 0;
        for role in &self.shared_scalars {
            for domain in role {
                for comp in domain {
                    n += comp.len();
                }
            }
        }
        for role in &self.vm_vector_scalars {
            for domain in role {
                for group in domain {
                    for axis in group {
                        n += axis.len();
                    }
                }
            }
        }
        for role in &self.vm_matrix_scalars {
            for domain in role {
                for group in domain {
                    for axis in group {
                        n += axis.len();
                    }
                }
            }
        }
        n
    }

    /// Number of stored shared d-vector entries.
    pub fn shared_entry_count(&self) -> usize {
        let mut n = 0;
        for role in &self.shared {
            for t in role {
                n += t.rows.len();
            }
        }
        for role in &self.vm_vectors {
            for group in role {
                for t in group {
                    n += t.rows.len();
                }
            }
        }
        for role in &self.vm_matrices {
            for group in role {
                for t in group {
                    n += t.rows.len();
                }
            }
        }
        n
    }

    /// Total scalar parameter count (shared channels plus modulation scalars).
    pub fn param_count(&self) -> usize {
        self.shared_entry_count() * self.dim + self.modulation_entry_count()
    }

    /// Flattens all parameters in the canonical order: shared entries first
    /// (role, then component or group/factor, then index, then channel),
    /// followed by modulation scalars (role, domain, component or
    /// group/factor, index).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for role in &self.shared {
            for t in role {
                for row in &t.rows {
                    out.extend_from_slice(row);
                }
            }
        }
        // Matrices follow the vectors of the same role and group.
        if self.mode.is_factorized() {
            for r in 0..3 {
                for group in 0..self.groups() {
                    for t in &self.vm_vectors[r][group] {
                        for row in &t.rows {
                            out.extend_from_slice(row);
                        }
                    }
                    for t in &self.vm_matrices[r][group] {
                        for row in &t.rows {
                            out.extend_from_slice(row);
                        }
                    }
                }
            }
        }
        for role in &self.shared_scalars {
            for domain in role {
                for comp in domain {
                    out.extend_from_slice(comp);
                }
            }
        }
        for r in 0..self.vm_vector_scalars.len() {
            for domain in 0..self.domains {
                for group in 0..self.groups() {
                    for axis in 0..SIGNAL_GROUP_SIZE {
                        out.extend_from_slice(&self.vm_vector_scalars[r][domain][group][axis]);
                    }
                    for axis in 0..SIGNAL_GROUP_SIZE {
                        out.extend_from_slice(&self.vm_matrix_scalars[r][domain][group][axis]);
                    }
                }
            }
        }
        out
    }

    /// Writes a flat parameter vector back, in the same canonical order as
    /// [`LookupTableSet::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut cursor = 0usize;
        fn take<'v>(values: &'v [f64], len: usize, cursor: &mut usize) -> &'v [f64] {
            let s = &values[*cursor..*cursor + len];
            *cursor += len;
            s
        }
        match self.mode {
            TableMode::Base | TableMode::DomainModulated => {
                for role in &mut self.shared {
                    for t in role {
                        for row in &mut t.rows {
                            let len = row.len();
                            row.copy_from_slice(take(values, len, &mut cursor));
                        }
                    }
                }
            }
            TableMode::Vm | TableMode::VmDomainModulated => {
                let groups = self.groups();
                for r in 0..3 {
                    for group in 0..groups {
                        for t in &mut self.vm_vectors[r][group] {
                            for row in &mut t.rows {
                                let len = row.len();
                                row.copy_from_slice(take(values, len, &mut cursor));
                            }
                        }
                        for t in &mut self.vm_matrices[r][group] {
                            for row in &mut t.rows {
                                let len = row.len();
                                row.copy_from_slice(take(values, len, &mut cursor));
                            }
                        }
                    }
                }
            }
        }
        for role in &mut self.shared_scalars {
            for domain in role {
                for comp in domain {
                    let len = comp.len();
                    comp.copy_from_slice(take(values, len, &mut cursor));
                }
            }
        }
        let groups = self.groups();
        if self.mode == TableMode::VmDomainModulated {
            for r in 0..3 {
                for domain in 0..self.domains {
                    for group in 0..groups {
                        for axis in 0..SIGNAL_GROUP_SIZE {
                            let row = &mut self.vm_vector_scalars[r][domain][group][axis];
                            let len = row.len();
                                row.copy_from_slice(take(values, len, &mut cursor));
                        }
                        for axis in 0..SIGNAL_GROUP_SIZE {
                            let row = &mut self.vm_matrix_scalars[r][domain][group][axis];
                            let len = row.len();
                                row.copy_from_slice(take(values, len, &mut cursor));
                        }
                    }
                }
            }
        }
        debug_assert_eq!(cursor, values.len());
        Ok(())
    }

    /// Human-readable labels for every flat parameter slot, in the canonical
    /// order. Used by diagnostics to name a failing parameter.
    pub fn param_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.param_count());
        match self.mode {
            TableMode::Base | TableMode::DomainModulated => {
                for (r, role) in TableRole::ALL.iter().enumerate() {
                    for m in 0..self.components {
                        for bin in 0..self.divisions_1d {
                            for ch in 0..self.dim {
                                out.push(format!("shared[{}][m{}][b{}][c{}]", role.label(), m, bin, ch));
                            }
                        }
                        let _ = r;
                    }
                }
            }
            TableMode::Vm | TableMode::VmDomainModulated => {
                for role in TableRole::ALL {
                    for g in 0..self.groups() {
                        for axis in 0..SIGNAL_GROUP_SIZE {
                            for bin in 0..self.divisions_1d {
                                for ch in 0..self.dim {
                                    out.push(format!(
                                        "vec[{}][g{}][a{}][b{}][c{}]",
                                        role.label(),
                                        g,
                                        axis,
                                        bin,
                                        ch
                                    ));
                                }
                            }
                        }
                        for axis in 0..SIGNAL_GROUP_SIZE {
                            for pair in 0..self.divisions_2d * self.divisions_2d {
                                for ch in 0..self.dim {
                                    out.push(format!(
                                        "mat[{}][g{}][a{}][p{}][c{}]",
                                        role.label(),
                                        g,
                                        axis,
                                        pair,
                                        ch
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.mode == TableMode::DomainModulated {
            for role in TableRole::ALL {
                for l in 0..self.domains {
                    for m in 0..self.components {
                        for bin in 0..self.divisions_1d {
                            out.push(format!("mod[{}][l{}][m{}][b{}]", role.label(), l, m, bin));
                        }
                    }
                }
            }
        }
        if self.mode == TableMode::VmDomainModulated {
            for role in TableRole::ALL {
                for l in 0..self.domains {
                    for g in 0..self.groups() {
                        for axis in 0..SIGNAL_GROUP_SIZE {
                            for bin in 0..self.divisions_1d {
                                out.push(format!(
                                    "vmod[{}][l{}][g{}][a{}][b{}]",
                                    role.label(),
                                    l,
                                    g,
                                    axis,
                                    bin
                                ));
                            }
                        }
                        for axis in 0..SIGNAL_GROUP_SIZE {
                            for pair in 0..self.divisions_2d * self.divisions_2d {
                                out.push(format!(
                                    "mmod[{}][l{}][g{}][a{}][p{}]",
                                    role.label(),
                                    l,
                                    g,
                                    axis,
                                    pair
                                ));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    // Accessors used by tests and parameter surgery.

    pub fn shared_table(&self, role: TableRole, component: usize) -> &Table1d {
        &self.shared[role.index()][component]
    }

    pub fn shared_table_mut(&mut self, role: TableRole, component: usize) -> &mut Table1d {
        &mut self.shared[role.index()][component]
    }

    pub fn shared_scalar(&self, role: TableRole, domain: usize, component: usize, bin: usize) -> f64 {
        self.shared_scalars[role.index()][domain][component][bin]
    }

    pub fn set_shared_scalar(
        &mut self,
        role: TableRole,
        domain: usize,
        component: usize,
        bin: usize,
        value: f64,
    ) {
        self.shared_scalars[role.index()][domain][component][bin] = value;
    }

    pub fn vm_vector_table(&self, role: TableRole, group: usize, axis: usize) -> &Table1d {
        &self.vm_vectors[role.index()][group][axis]
    }

    pub fn vm_vector_table_mut(&mut self, role: TableRole, group: usize, axis: usize) -> &mut Table1d {
        &mut self.vm_vectors[role.index()][group][axis]
    }

    pub fn vm_matrix_table(&self, role: TableRole, group: usize, axis: usize) -> &Table2d {
        &self.vm_matrices[role.index()][group][axis]
    }

    pub fn vm_matrix_table_mut(&mut self, role: TableRole, group: usize, axis: usize) -> &mut Table2d {
        &mut self.vm_matrices[role.index()][group][axis]
    }

    pub fn set_vm_vector_scalar(
        &mut self,
        role: TableRole,
        domain: usize,
        group: usize,
        axis: usize,
        bin: usize,
        value: f64,
    ) {
        self.vm_vector_scalars[role.index()][domain][group][axis][bin] = value;
    }

    pub fn set_vm_matrix_scalar(
        &mut self,
        role: TableRole,
        domain: usize,
        group: usize,
        axis: usize,
        pair: usize,
        value: f64,
    ) {
        self.vm_matrix_scalars[role.index()][domain][group][axis][pair] = value;
    }

    /// Zeroes every shared entry belonging to one role.
    pub fn zero_role(&mut self, role: TableRole) {
        let r = role.index();
        if let Some(tables) = self.shared.get_mut(r) {
            for t in tables {
                for row in &mut t.rows {
                    row.fill(0.0);
                }
            }
        }
        if let Some(groups) = self.vm_vectors.get_mut(r) {
            for g in groups {
                for t in g {
                    for row in &mut t.rows {
                        row.fill(0.0);
                    }
                }
            }
        }
        if let Some(groups) = self.vm_matrices.get_mut(r) {
            for g in groups {
                for t in g {
                    for row in &mut t.rows {
                        row.fill(0.0);
                    }
                }
            }
        }
    }
}
