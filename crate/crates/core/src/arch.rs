//! The Arch1..Arch11 family: VGG16 and ten successively halved variants.
//!
//! Every architecture is a stack of 3x3 "same" conv blocks, each followed by
//! 2x2 max pooling, then dense hidden layers and a softmax head. The family
//! table fixes conv-layer counts and dense widths; filter counts per block
//! are chosen so each member lands near its parameter budget at 224x224x3.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;
use underpass_tensor::{LayerKind, Sequential};

pub const DEFAULT_CLASSES: usize = 4;

/// Parameter budgets of Arch1..Arch11 at 224x224x3.
pub const TABLE_TARGETS: [u64; 11] = [
    100_000,
    200_000,
    400_000,
    800_000,
    1_500_000,
    3_000_000,
    6_000_000,
    13_000_000,
    35_000_000,
    67_000_000,
    134_000_000,
];

/// Conv layer count of each family member.
pub const TABLE_CONV_LAYERS: [usize; 11] = [2, 3, 3, 4, 4, 4, 4, 8, 10, 11, 13];

/// Accepted ratio `count(step) / count(step + 1)` range when moving down the family.
pub const REDUCTION_BAND: (f64, f64) = (0.36, 0.59);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ArchError {
    #[error("{id}: resolution {height}x{width} underflows after {pools} pooling layers")]
    PoolUnderflow {
        id: String,
        height: usize,
        width: usize,
        pools: usize,
    },
    #[error("{id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("{id}: no reduction move reaches ratio band [{lo}, {hi}]; tried {tried}")]
    NoLegalMove {
        id: String,
        lo: f64,
        hi: f64,
        tried: String,
    },
    #[error("architecture text line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Resolution {
    pub const fn square(side: usize) -> Self {
        Self {
            height: side,
            width: side,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub filters: usize,
    pub layers: usize,
}

const fn block(filters: usize, layers: usize) -> ConvBlock {
    ConvBlock { filters, layers }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub id: String,
    pub conv_blocks: Vec<ConvBlock>,
    pub dense_hidden: Vec<usize>,
    pub num_classes: usize,
    pub input: Resolution,
    pub dropout_rate: f64,
    pub l2_rate: f64,
}

impl ArchitectureSpec {
    pub fn new(id: impl Into<String>, conv_blocks: Vec<ConvBlock>, dense_hidden: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            conv_blocks,
            dense_hidden,
            num_classes: DEFAULT_CLASSES,
            input: Resolution::square(224),
            dropout_rate: 0.5,
            l2_rate: 0.0,
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.layers).sum()
    }

    pub fn with_resolution(mut self, input: Resolution) -> Self {
        self.input = input;
        self
    }

    /// Same topology with every conv filter count and dense width divided by
    /// `divisor` (rounded up, at least `floor`). Used for CPU-sized runs.
    pub fn narrowed(&self, divisor: usize, floor: usize) -> Self {
        let shrink = |v: usize| v.div_ceil(divisor.max(1)).max(floor.max(1)).min(v);
        let mut out = self.clone();
        for b in &mut out.conv_blocks {
            b.filters = shrink(b.filters);
        }
        for w in &mut out.dense_hidden {
            *w = shrink(*w);
        }
        if divisor > 1 {
            out.id = format!("{}/{divisor}", self.id);
        }
        out
    }

    /// Spatial size and channel count entering the first dense layer.
    pub fn feature_map(&self) -> Result<(usize, usize, usize), ArchError> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut c = self.input.channels;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(ArchError::PoolUnderflow {
                    id: self.id.clone(),
                    height: self.input.height,
                    width: self.input.width,
                    pools: i + 1,
                });
            }
            h /= 2;
            w /= 2;
            c = b.filters;
        }
        Ok((h, w, c))
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let invalid = |reason: &str| ArchError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.conv_blocks.is_empty() {
            return Err(invalid("needs at least one conv block"));
        }
        if self.conv_blocks.iter().any(|b| b.filters == 0 || b.layers == 0) {
            return Err(invalid("conv blocks need filters >= 1 and layers >= 1"));
        }
        if self.dense_hidden.contains(&0) || self.num_classes == 0 {
            return Err(invalid("dense widths and class count must be >= 1"));
        }
        if self.input.height == 0 || self.input.width == 0 || self.input.channels == 0 {
            return Err(invalid("input resolution must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(self.l2_rate >= 0.0) {
            return Err(invalid("dropout must lie in [0, 1) and l2 must be >= 0"));
        }
        self.feature_map().map(|_| ())
    }

    /// Exact trainable parameter count from the closed form
    /// `sum conv (9 c_in f + f) + sum dense ((fan_in + 1) width)`, including
    /// the class head.
    pub fn count_parameters(&self) -> Result<u64, ArchError> {
        self.validate()?;
        let mut total = 0u64;
        let mut c_in = self.input.channels as u64;
        for b in &self.conv_blocks {
            let f = b.filters as u64;
            for _ in 0..b.layers {
                total += 9 * c_in * f + f;
                c_in = f;
            }
        }
        let (h, w, c) = self.feature_map()?;
        let mut fan_in = (h * w * c) as u64;
        for &width in self.dense_hidden.iter().chain(std::iter::once(&self.num_classes)) {
            total += (fan_in + 1) * width as u64;
            fan_in = width as u64;
        }
        Ok(total)
    }

    /// Layer stack: conv+relu per conv layer, pooling after each block,
    /// dense+relu+dropout per hidden layer, linear class head (logits).
    pub fn layers(&self) -> Result<Vec<LayerKind>, ArchError> {
        self.validate()?;
        let mut layers = Vec::new();
        for b in &self.conv_blocks {
            for _ in 0..b.layers {
                layers.push(LayerKind::Conv2d {
                    filters: b.filters,
                    stride: 1,
                });
                layers.push(LayerKind::ReLU);
            }
            layers.push(LayerKind::MaxPool2x2);
        }
        for &width in &self.dense_hidden {
            layers.push(LayerKind::Dense { width });
            layers.push(LayerKind::ReLU);
            if self.dropout_rate > 0.0 {
                layers.push(LayerKind::Dropout {
                    rate: self.dropout_rate,
                });
            }
        }
        layers.push(LayerKind::Dense {
            width: self.num_classes,
        });
        Ok(layers)
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.input.channels, self.input.height, self.input.width]
    }

    /// Instantiates the network with seeded weights.
    pub fn build<T: underpass_tensor::Scalar>(&self, seed: u64) -> Result<Sequential<T>, crate::Error> {
        Ok(Sequential::new(self.layers()?, self.input_shape(), seed)?)
    }
}

/// `count_parameters` as a free function.
pub fn count_parameters(spec: &ArchitectureSpec) -> Result<u64, ArchError> {
    spec.count_parameters()
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "arch {}", self.id)?;
        writeln!(
            f,
            "input {} {} {}",
            self.input.height, self.input.width, self.input.channels
        )?;
        writeln!(f, "classes {}", self.num_classes)?;
        writeln!(f, "dropout {:?}", self.dropout_rate)?;
        writeln!(f, "l2 {:?}", self.l2_rate)?;
        for b in &self.conv_blocks {
            for _ in 0..b.layers {
                writeln!(f, "conv {}", b.filters)?;
            }
            writeln!(f, "pool")?;
        }
        for w in &self.dense_hidden {
            writeln!(f, "dense {w}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchitectureSpec {
    type Err = ArchError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut spec = ArchitectureSpec::new("", Vec::new(), Vec::new());
        let mut pending: Option<ConvBlock> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: String| ArchError::Parse { line, reason };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let args: Vec<&str> = parts.collect();
            let num = |idx: usize| -> Result<usize, ArchError> {
                args.get(idx)
                    .ok_or_else(|| err(format!("`{key}` is missing an argument")))?
                    .parse()
                    .map_err(|e| err(format!("`{key}`: {e}")))
            };
            let real = |idx: usize| -> Result<f64, ArchError> {
                args.get(idx)
                    .ok_or_else(|| err(format!("`{key}` is missing an argument")))?
                    .parse()
                    .map_err(|e| err(format!("`{key}`: {e}")))
            };
            match key {
                "arch" => spec.id = args.join(" "),
                "input" => {
                    spec.input = Resolution {
                        height: num(0)?,
                        width: num(1)?,
                        channels: num(2)?,
                    }
                }
                "classes" => spec.num_classes = num(0)?,
                "dropout" => spec.dropout_rate = real(0)?,
                "l2" => spec.l2_rate = real(0)?,
                "conv" => {
                    if !spec.dense_hidden.is_empty() {
                        return Err(err("conv after dense".into()));
                    }
                    let filters = num(0)?;
                    match &mut pending {
                        Some(b) if b.filters == filters => b.layers += 1,
                        Some(b) => return Err(err(format!("block mixes {} and {filters} filters", b.filters))),
                        None => pending = Some(block(filters, 1)),
                    }
                }
                "pool" => {
                    let b = pending.take().ok_or_else(|| err("pool without conv".into()))?;
                    spec.conv_blocks.push(b);
                }
                "dense" => {
                    if pending.is_some() {
                        return Err(err("conv block not closed by pool".into()));
                    }
                    spec.dense_hidden.push(num(0)?);
                }
                other => return Err(err(format!("unknown layer kind `{other}`"))),
            }
        }
        if pending.is_some() {
            return Err(ArchError::Parse {
                line: text.lines().count(),
                reason: "conv block not closed by pool".into(),
            });
        }
        spec.validate().map_err(|e| ArchError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
        Ok(spec)
    }
}

/// The eleven canonical specs with their parameter budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyTable {
    pub specs: Vec<ArchitectureSpec>,
    pub targets: [u64; 11],
}

impl FamilyTable {
    pub fn get(&self, id: &str) -> Option<&ArchitectureSpec> {
        self.specs.iter().find(|s| s.id.eq_ignore_ascii_case(id))
    }

    pub fn counts(&self) -> Result<Vec<u64>, ArchError> {
        self.specs.iter().map(ArchitectureSpec::count_parameters).collect()
    }

    /// Every member at another input resolution (counts change with it).
    pub fn at_resolution(&self, input: Resolution) -> FamilyTable {
        FamilyTable {
            specs: self.specs.iter().map(|s| s.clone().with_resolution(input)).collect(),
            targets: self.targets,
        }
    }

    /// Strictly increasing counts with consecutive ratios in `[lo, hi]`.
    pub fn check_ordering(&self, lo: f64, hi: f64) -> Result<(), String> {
        let counts = self.counts().map_err(|e| e.to_string())?;
        for (i, pair) in counts.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(format!("Arch{} does not exceed Arch{}", i + 2, i + 1));
            }
            let ratio = pair[1] as f64 / pair[0] as f64;
            if !(lo..=hi).contains(&ratio) {
                return Err(format!(
                    "Arch{}/Arch{} ratio {ratio:.3} outside [{lo}, {hi}]",
                    i + 2,
                    i + 1
                ));
            }
        }
        Ok(())
    }
}

/// The canonical family at 224x224x3 with four classes.
pub fn generate_family() -> FamilyTable {
    let rows: [(Vec<ConvBlock>, Vec<usize>); 11] = [
        (vec![block(4, 1), block(4, 1)], vec![8]),
        (vec![block(4, 1), block(4, 1), block(16, 1)], vec![16]),
        (vec![block(4, 1), block(8, 1), block(16, 1)], vec![32]),
        (vec![block(4, 1), block(8, 1), block(16, 1), block(32, 1)], vec![128]),
        (vec![block(8, 1), block(16, 1), block(32, 1), block(64, 1)], vec![128]),
        (vec![block(8, 1), block(16, 1), block(32, 1), block(64, 1)], vec![256]),
        (vec![block(16, 1), block(32, 1), block(64, 1), block(128, 1)], vec![256]),
        (
            vec![block(32, 2), block(64, 2), block(128, 2), block(128, 2)],
            vec![512],
        ),
        (
            vec![block(64, 2), block(128, 2), block(256, 2), block(512, 2), block(512, 2)],
            vec![1024],
        ),
        (
            vec![block(64, 2), block(128, 2), block(256, 3), block(512, 2), block(512, 2)],
            vec![2048, 2048],
        ),
        (
            vec![block(64, 2), block(128, 2), block(256, 3), block(512, 3), block(512, 3)],
            vec![4096, 4096],
        ),
    ];
    let specs = rows
        .into_iter()
        .enumerate()
        .map(|(i, (blocks, dense))| ArchitectureSpec::new(format!("Arch{}", i + 1), blocks, dense))
        .collect();
    FamilyTable {
        specs,
        targets: TABLE_TARGETS,
    }
}

/// One of the three structural reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionMove {
    RemoveConvLayers,
    ReduceFilters,
    ShrinkDense,
}

impl ReductionMove {
    const ORDER: [ReductionMove; 3] = [
        ReductionMove::RemoveConvLayers,
        ReductionMove::ReduceFilters,
        ReductionMove::ShrinkDense,
    ];

    /// Candidate specs produced by this move at increasing strength.
    fn candidates(self, spec: &ArchitectureSpec) -> Vec<ArchitectureSpec> {
        let mut out = Vec::new();
        let mut cur = spec.clone();
        loop {
            let next = match self {
                ReductionMove::RemoveConvLayers => remove_one_conv(&cur),
                ReductionMove::ReduceFilters => halve(&cur, true),
                ReductionMove::ShrinkDense => halve(&cur, false),
            };
            match next {
                Some(n) if n != cur => {
                    out.push(n.clone());
                    cur = n;
                }
                _ => break,
            }
        }
        out
    }
}

fn remove_one_conv(spec: &ArchitectureSpec) -> Option<ArchitectureSpec> {
    if spec.conv_layer_count() < 2 {
        return None;
    }
    let mut out = spec.clone();
    // Deepest block that keeps at least one layer; otherwise drop the last block.
    match out.conv_blocks.iter().rposition(|b| b.layers > 1) {
        Some(i) => out.conv_blocks[i].layers -= 1,
        None => {
            out.conv_blocks.pop();
        }
    }
    Some(out)
}

fn halve(spec: &ArchitectureSpec, filters: bool) -> Option<ArchitectureSpec> {
    let mut out = spec.clone();
    if filters {
        for b in &mut out.conv_blocks {
            b.filters = (b.filters / 2).max(1);
        }
    } else {
        for w in &mut out.dense_hidden {
            *w = (*w / 2).max(1);
        }
    }
    Some(out)
}

/// Rotating pointer to the next reduction move to try.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReductionCursor(usize);

impl ReductionCursor {
    pub fn starting_at(mv: ReductionMove) -> Self {
        Self(ReductionMove::ORDER.iter().position(|&m| m == mv).expect("listed"))
    }

    pub fn peek(&self) -> ReductionMove {
        ReductionMove::ORDER[self.0 % 3]
    }

    fn advance(&mut self) {
        self.0 = (self.0 + 1) % 3;
    }
}

/// Applies a single reduction move that brings the parameter count into
/// [`REDUCTION_BAND`] of the input's count, using the weakest strength that
/// does so. Moves that cannot reach the band are skipped; the cursor ends
/// one past the move that was applied.
pub fn reduce_step(
    spec: &ArchitectureSpec,
    cursor: &mut ReductionCursor,
) -> Result<(ArchitectureSpec, ReductionMove), ArchError> {
    let base = spec.count_parameters()? as f64;
    let (lo, hi) = REDUCTION_BAND;
    let mut tried = Vec::new();
    for _ in 0..3 {
        let mv = cursor.peek();
        cursor.advance();
        let hit = mv.candidates(spec).into_iter().find(|c| {
            c.count_parameters()
                .map(|n| (lo..=hi).contains(&(n as f64 / base)))
                .unwrap_or(false)
        });
        if let Some(mut reduced) = hit {
            reduced.id = format!("{}-", spec.id);
            return Ok((reduced, mv));
        }
        tried.push(format!("{mv:?}"));
    }
    Err(ArchError::NoLegalMove {
        id: spec.id.clone(),
        lo,
        hi,
        tried: tried.join(", "),
    })
}
