//! Key baskets, pooling-row attention calibration and basket-level profiling.
//!
//! Keys are grouped into contiguous baskets: the pooling token (`<s>`, key 0)
//! sits alone in the first basket and the remaining `L - 1` keys are tiled in
//! chunks of `basket_size`, the last chunk possibly shorter. Calibration
//! rescales the `<s>` query's post-softmax row so every basket carries a fixed
//! total mass while ratios inside a basket stay exactly as they were.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{kahan_sum, Scalar};

/// Contiguous key ranges (0-based, half-open) covering `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasketPartition {
    len: usize,
    basket_size: usize,
    baskets: Vec<Range<usize>>,
}

impl BasketPartition {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn basket_size(&self) -> usize {
        self.basket_size
    }

    pub fn baskets(&self) -> &[Range<usize>] {
        &self.baskets
    }

    pub fn basket_count(&self) -> usize {
        self.baskets.len()
    }

    /// Index of the basket containing `key`.
    pub fn basket_of(&self, key: usize) -> Option<usize> {
        if key >= self.len {
            None
        } else if key == 0 {
            Some(0)
        } else {
            Some(1 + (key - 1) / self.basket_size)
        }
    }
}

/// Splits `len` keys into `ceil((len - 1) / basket_size) + 1` baskets.
pub fn partition_keys(len: usize, basket_size: usize) -> Result<BasketPartition> {
    if len == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    if basket_size == 0 {
        return Err(Error::InvalidArgument("basket size must be >= 1".into()));
    }
    let mut baskets = Vec::with_capacity(1 + (len - 1).div_ceil(basket_size));
    baskets.push(0..1);
    let mut start = 1;
    while start < len {
        let end = (start + basket_size).min(len);
        baskets.push(start..end);
        start = end;
    }
    Ok(BasketPartition {
        len,
        basket_size,
        baskets,
    })
}

/// How the calibrated row distributes mass across baskets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMode {
    /// Every basket gets `1/m`, including a short trailing basket.
    #[default]
    #[serde(alias = "uniform")]
    UniformPerBasket,
    /// Basket `b` gets `|b| / L`.
    #[serde(alias = "proportional")]
    SizeProportional,
}

impl MassMode {
    pub fn label(self) -> &'static str {
        match self {
            MassMode::UniformPerBasket => "uniform",
            MassMode::SizeProportional => "proportional",
        }
    }
}

impl fmt::Display for MassMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "uniform_per_basket" => Ok(MassMode::UniformPerBasket),
            "proportional" | "size_proportional" => Ok(MassMode::SizeProportional),
            other => Err(Error::InvalidArgument(format!("unknown mass mode `{other}`"))),
        }
    }
}

/// Parameters of the calibration operator.
///
/// Layers are 1-based, matching how transformer depth is usually reported.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub basket_size: usize,
    pub calibrated_layers: BTreeSet<usize>,
    #[serde(default)]
    pub mass_mode: MassMode,
}

impl CalibrationConfig {
    pub fn new(
        basket_size: usize,
        calibrated_layers: impl IntoIterator<Item = usize>,
        mass_mode: MassMode,
    ) -> Result<Self> {
        if basket_size == 0 {
            return Err(Error::InvalidArgument("basket size must be >= 1".into()));
        }
        let calibrated_layers: BTreeSet<usize> = calibrated_layers.into_iter().collect();
        if calibrated_layers.contains(&0) {
            return Err(Error::InvalidArgument("layers are 1-based".into()));
        }
        Ok(Self {
            basket_size,
            calibrated_layers,
            mass_mode,
        })
    }

    /// Calibrates the last half of a `layer_count`-deep encoder.
    pub fn last_half(basket_size: usize, layer_count: usize, mass_mode: MassMode) -> Result<Self> {
        Self::new(basket_size, (layer_count / 2 + 1)..=layer_count, mass_mode)
    }

    pub fn validate_for(&self, layer_count: usize) -> Result<()> {
        if self.basket_size == 0 {
            return Err(Error::InvalidArgument("basket size must be >= 1".into()));
        }
        match self.calibrated_layers.iter().find(|&&l| l == 0 || l > layer_count) {
            Some(l) => Err(Error::InvalidArgument(format!(
                "calibrated layer {l} outside 1..={layer_count}"
            ))),
            None => Ok(()),
        }
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        self.calibrated_layers.contains(&layer)
    }

    /// Variant id, e.g. `B128-L7..12-uniform`.
    ///
    /// Contiguous layer sets render as `first..last`; anything else as a
    /// comma-separated list.
    pub fn id(&self) -> String {
        format!("B{}-L{}-{}", self.basket_size, layer_label(&self.calibrated_layers), self.mass_mode)
    }
}

fn layer_label(layers: &BTreeSet<usize>) -> String {
    let (Some(&first), Some(&last)) = (layers.first(), layers.last()) else {
        return "none".into();
    };
    if last - first + 1 == layers.len() {
        format!("{first}..{last}")
    } else {
        layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl FromStr for CalibrationConfig {
    type Err = Error;

    /// Parses the id format produced by [`CalibrationConfig::id`].
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed calibration id `{s}`"));
        let mut parts = s.splitn(3, '-');
        let basket = parts.next().and_then(|p| p.strip_prefix('B')).ok_or_else(bad)?;
        let layers = parts.next().and_then(|p| p.strip_prefix('L')).ok_or_else(bad)?;
        let mode = parts.next().ok_or_else(bad)?;
        let basket_size: usize = basket.parse().map_err(|_| bad())?;
        let layers = parse_layer_list(layers).ok_or_else(bad)?;
        Self::new(basket_size, layers, mode.parse()?)
    }
}

/// Parses `7..12`, `3,5,9` or `none`.
pub fn parse_layer_list(s: &str) -> Option<BTreeSet<usize>> {
    if s == "none" {
        return Some(BTreeSet::new());
    }
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().ok()?;
        let b: usize = b.trim().parse().ok()?;
        return (a <= b).then(|| (a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().ok()).collect()
}

fn check_row<T: Scalar>(row: &[T], partition: &BasketPartition) -> Result<()> {
    if row.len() != partition.len() {
        return Err(Error::LengthMismatch {
            expected: partition.len(),
            actual: row.len(),
        });
    }
    if let Some(i) = row.iter().position(|&v| !v.is_finite() || v < T::zero()) {
        return Err(Error::InvalidDistribution(format!(
            "entry {i} is negative or non-finite"
        )));
    }
    Ok(())
}

fn target_mass<T: Scalar>(mode: MassMode, basket: &Range<usize>, partition: &BasketPartition) -> T {
    match mode {
        MassMode::UniformPerBasket => T::one() / T::from_usize_lossy(partition.basket_count()),
        MassMode::SizeProportional => {
            T::from_usize_lossy(basket.len()) / T::from_usize_lossy(partition.len())
        }
    }
}

/// Rescales `row` in place; see [`calibrate_row`].
pub fn calibrate_row_in_place<T: Scalar>(
    row: &mut [T],
    partition: &BasketPartition,
    mode: MassMode,
) -> Result<()> {
    check_row(row, partition)?;
    // Compute every factor before touching the row so a zero-mass basket
    // leaves the input unmodified.
    let factors = partition
        .baskets()
        .iter()
        .enumerate()
        .map(|(b, range)| {
            let mass = kahan_sum(row[range.clone()].iter().copied());
            if mass <= T::zero() {
                Err(Error::ZeroMassBasket { basket: b + 1 })
            } else {
                Ok(target_mass::<T>(mode, range, partition) / mass)
            }
        })
        .collect::<Result<Vec<T>>>()?;
    for (range, factor) in partition.baskets().iter().zip(factors) {
        row[range.clone()].iter_mut().for_each(|v| *v *= factor);
    }
    Ok(())
}

/// Returns a copy of `row` with each basket rescaled by a single factor so
/// that its total mass equals the mode's target.
pub fn calibrate_row<T: Scalar>(row: &[T], partition: &BasketPartition, mode: MassMode) -> Result<Vec<T>> {
    let mut out = row.to_vec();
    calibrate_row_in_place(&mut out, partition, mode)?;
    Ok(out)
}

/// Which layers a profile averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    All,
    /// The last `k` layers.
    Last(usize),
    /// Inclusive, 1-based.
    Range(usize, usize),
}

impl LayerSelection {
    pub fn resolve(self, layer_count: usize) -> Result<Vec<usize>> {
        let (lo, hi) = match self {
            LayerSelection::All => (1, layer_count),
            LayerSelection::Last(k) => (layer_count.saturating_sub(k) + 1, layer_count),
            LayerSelection::Range(a, b) => (a, b),
        };
        if lo == 0 || lo > hi || hi > layer_count {
            return Err(Error::EmptyInput(format!(
                "layer selection {self} is empty or outside 1..={layer_count}"
            )));
        }
        Ok((lo..=hi).collect())
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Last(k) => write!(f, "last{k}"),
            LayerSelection::Range(a, b) => write!(f, "{a}..{b}"),
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        if let Some(k) = s.strip_prefix("last") {
            return k
                .parse()
                .map(LayerSelection::Last)
                .map_err(|_| Error::InvalidArgument(format!("bad layer selection `{s}`")));
        }
        match s.split_once("..") {
            Some((a, b)) => match (a.parse(), b.parse()) {
                (Ok(a), Ok(b)) => Ok(LayerSelection::Range(a, b)),
                _ => Err(Error::InvalidArgument(format!("bad layer selection `{s}`"))),
            },
            None => Err(Error::InvalidArgument(format!("bad layer selection `{s}`"))),
        }
    }
}

/// Attention mass of the `<s>` query aggregated over key baskets.
///
/// `<s>` (first key) and `</s>` (last key) are reported on their own, so the
/// first content basket holds only content keys. Baskets left empty once
/// `</s>` is removed are dropped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionProfile<T> {
    pub start_mass: T,
    pub end_mass: T,
    /// Key ranges (0-based, half-open) of each content basket.
    pub basket_ranges: Vec<Range<usize>>,
    pub basket_masses: Vec<T>,
    /// 1-based layers averaged over.
    pub layers: Vec<usize>,
    pub head_count: usize,
}

impl<T: Scalar> AttentionProfile<T> {
    pub fn total(&self) -> T {
        self.start_mass + self.end_mass + kahan_sum(self.basket_masses.iter().copied())
    }

    pub fn describe_layers(&self) -> String {
        match (self.layers.first(), self.layers.last()) {
            (Some(a), Some(b)) => format!("mean over layers {a}..{b}, {} heads", self.head_count),
            _ => String::new(),
        }
    }
}

/// Averages basket masses over heads, then over the selected layers.
///
/// `rows[layer][head]` is the post-softmax `<s>` row of that layer and head
/// (layers 0-based in storage, 1-based in `layers`).
pub fn basket_profile<T: Scalar>(
    rows: &[Vec<Vec<T>>],
    partition: &BasketPartition,
    layers: &[usize],
) -> Result<AttentionProfile<T>> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("layer selection".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > rows.len()) {
        return Err(Error::InvalidArgument(format!(
            "layer {l} outside 1..={}",
            rows.len()
        )));
    }
    let len = partition.len();
    if len < 2 {
        return Err(Error::InvalidArgument(
            "profiling needs at least the <s> and </s> keys".into(),
        ));
    }
    let end_key = len - 1;
    let basket_ranges: Vec<Range<usize>> = partition.baskets()[1..]
        .iter()
        .map(|r| r.start..r.end.min(end_key))
        .filter(|r| !r.is_empty())
        .collect();

    let mut start_mass = T::zero();
    let mut end_mass = T::zero();
    let mut basket_masses = vec![T::zero(); basket_ranges.len()];
    let mut head_count = 0;
    for &layer in layers {
        let heads = &rows[layer - 1];
        if heads.is_empty() {
            return Err(Error::EmptyInput(format!("no heads captured for layer {layer}")));
        }
        head_count = heads.len();
        let w = T::one() / T::from_usize_lossy(heads.len() * layers.len());
        for row in heads {
            check_row(row, partition)?;
            start_mass += row[0] * w;
            end_mass += row[end_key] * w;
            for (acc, range) in basket_masses.iter_mut().zip(&basket_ranges) {
                *acc += kahan_sum(row[range.clone()].iter().copied()) * w;
            }
        }
    }
    Ok(AttentionProfile {
        start_mass,
        end_mass,
        basket_ranges,
        basket_masses,
        layers: layers.to_vec(),
        head_count,
    })
}
