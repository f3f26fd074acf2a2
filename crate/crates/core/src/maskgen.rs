//! Binary grid masks and their mixture coefficient.
//!
//! Cell convention: `1` keeps the primary image, `0` is filled from the
//! partner image. Ratio arguments count `0` cells; [`GridMask::lambda`]
//! counts `1` cells.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Smallest block area the blocked generator tries to place.
pub const MIN_BLOCK_CELLS: usize = 4;
/// Attempts per block before any block that fills at least one cell is taken.
pub const BLOCK_ATTEMPTS: usize = 10;
/// Lower bound of the log-uniform aspect ratio range; the upper bound is its inverse.
pub const MIN_ASPECT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPattern {
    Discrete,
    Blocked,
}

impl std::str::FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" | "random" => Ok(MaskPattern::Discrete),
            "blocked" => Ok(MaskPattern::Blocked),
            other => Err(Error::invalid(format!(
                "unknown mask pattern '{other}' (expected discrete|blocked)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskPattern::Discrete => "discrete",
            MaskPattern::Blocked => "blocked",
        })
    }
}

/// How the filled fraction is chosen for each batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioPolicy {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl RatioPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RatioPolicy::Fixed(r) if (0.0..=1.0).contains(&r) => Ok(()),
            RatioPolicy::Uniform { lo, hi } if 0.0 <= lo && lo <= hi && hi <= 1.0 => Ok(()),
            other => Err(Error::invalid(format!("invalid ratio policy {other:?}"))),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            RatioPolicy::Fixed(r) => r,
            RatioPolicy::Uniform { lo, hi } if lo == hi => lo,
            RatioPolicy::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

impl std::str::FromStr for RatioPolicy {
    type Err = Error;

    /// Accepts `0.5`, `fixed:0.5` or `uniform:0.25:0.75`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad ratio value '{v}'")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        let policy = match parts.as_slice() {
            [r] => RatioPolicy::Fixed(parse(r)?),
            ["fixed", r] => RatioPolicy::Fixed(parse(r)?),
            ["uniform", lo, hi] => RatioPolicy::Uniform {
                lo: parse(lo)?,
                hi: parse(hi)?,
            },
            _ => {
                return Err(Error::invalid(format!(
                    "bad ratio policy '{s}' (expected R, fixed:R or uniform:LO:HI)"
                )))
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl std::fmt::Display for RatioPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RatioPolicy::Fixed(r) => write!(f, "fixed:{r}"),
            RatioPolicy::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
        }
    }
}

/// An `n x n` binary mask over grid cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMask {
    grid_n: usize,
    cells: Vec<u8>,
    seed: u64,
}

impl GridMask {
    pub fn from_cells(grid_n: usize, cells: Vec<u8>, seed: u64) -> Result<Self> {
        if grid_n == 0 {
            return Err(Error::invalid("grid_n must be >= 1"));
        }
        if cells.len() != grid_n * grid_n {
            return Err(Error::shape(format!(
                "{} cells for a {grid_n}x{grid_n} grid",
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::invalid("mask cells must be 0 or 1"));
        }
        Ok(Self {
            grid_n,
            cells,
            seed,
        })
    }

    pub fn filled(grid_n: usize, value: u8) -> Result<Self> {
        Self::from_cells(grid_n, vec![value; grid_n * grid_n], 0)
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.grid_n + col]
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn zeros(&self) -> usize {
        self.cells.len() - self.ones()
    }

    /// Fraction of cells equal to 1.
    pub fn lambda(&self) -> f64 {
        lambda_of(self)
    }

    pub fn complement(&self) -> Self {
        Self {
            grid_n: self.grid_n,
            cells: self.cells.iter().map(|&c| 1 - c).collect(),
            seed: self.seed,
        }
    }

    pub fn expand(&self, height: usize, width: usize) -> Result<PixelMask> {
        expand_to_pixels(self, height, width)
    }
}

/// A binary mask at pixel resolution, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} mask",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn lambda(&self) -> f64 {
        self.ones() as f64 / self.values.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// Axis-aligned rectangle of grid cells, `[top, top + height) x [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellBlock {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CellBlock {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

/// A blocked mask together with the rectangles that produced its 0-region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockedMask {
    pub mask: GridMask,
    pub blocks: Vec<CellBlock>,
}

impl BlockedMask {
    pub fn max_block_area(&self) -> usize {
        self.blocks.iter().map(CellBlock::area).max().unwrap_or(0)
    }
}

/// Number of cells a ratio asks to fill on an `n x n` grid.
pub fn target_zero_cells(grid_n: usize, ratio: f64) -> usize {
    (ratio * (grid_n * grid_n) as f64).round() as usize
}

/// Discrete mask: exactly `round(ratio * n^2)` cells, chosen uniformly
/// without replacement, are set to 0.
pub fn gen_discrete_mask(grid_n: usize, ratio: f64, seed: u64) -> Result<GridMask> {
    if grid_n == 0 {
        return Err(Error::invalid("grid_n must be >= 1"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    let total = grid_n * grid_n;
    let zeros = target_zero_cells(grid_n, ratio);
    let mut rng = rng::from_seed(seed);
    let mut cells = vec![1u8; total];
    for i in index::sample(&mut rng, total, zeros) {
        cells[i] = 0;
    }
    GridMask::from_cells(grid_n, cells, seed)
}

/// Blocked mask: rectangles are sampled and zeroed until at least
/// `round(ratio * n^2)` cells are 0.
///
/// Each block draws an area between a per-attempt minimum and the remaining
/// deficit and a log-uniform aspect ratio in `[0.3, 1/0.3]`. For the first
/// [`BLOCK_ATTEMPTS`] attempts a block is accepted only if it fills between
/// one cell and the deficit; after that any block filling at least one cell
/// is accepted, so the overshoot never exceeds one block's area.
pub fn gen_blocked_mask(grid_n: usize, ratio: f64, seed: u64) -> Result<BlockedMask> {
    if grid_n < 2 {
        return Err(Error::invalid("blocked masks need grid_n >= 2"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "blocked mask ratio {ratio} outside (0, 1)"
        )));
    }
    let total = grid_n * grid_n;
    let target = target_zero_cells(grid_n, ratio);
    let min_block = MIN_BLOCK_CELLS.min(total / 2).max(1);
    let mut rng = rng::from_seed(seed);
    let mut cells = vec![1u8; total];
    let mut zeros = 0usize;
    let mut blocks = Vec::new();

    while zeros < target {
        let deficit = target - zeros;
        let block = sample_block(&mut rng, &cells, grid_n, min_block, deficit);
        for r in block.top..block.top + block.height {
            for c in block.left..block.left + block.width {
                let cell = &mut cells[r * grid_n + c];
                if *cell == 1 {
                    *cell = 0;
                    zeros += 1;
                }
            }
        }
        blocks.push(block);
    }

    Ok(BlockedMask {
        mask: GridMask::from_cells(grid_n, cells, seed)?,
        blocks,
    })
}

fn newly_filled(cells: &[u8], grid_n: usize, b: &CellBlock) -> usize {
    (b.top..b.top + b.height)
        .map(|r| {
            cells[r * grid_n + b.left..r * grid_n + b.left + b.width]
                .iter()
                .filter(|&&c| c == 1)
                .count()
        })
        .sum()
}

fn propose_block(rng: &mut StreamRng, grid_n: usize, lo: usize, hi: usize) -> CellBlock {
    let area = if lo >= hi {
        lo as f64
    } else {
        rng.random_range(lo as f64..=hi as f64)
    };
    let log_aspect = rng.random_range(MIN_ASPECT.ln()..=(1.0 / MIN_ASPECT).ln());
    let aspect = log_aspect.exp();
    let height = ((area * aspect).sqrt().round() as usize).clamp(1, grid_n);
    let width = ((area / aspect).sqrt().round() as usize).clamp(1, grid_n);
    let top = rng.random_range(0..=grid_n - height);
    let left = rng.random_range(0..=grid_n - width);
    CellBlock {
        top,
        left,
        height,
        width,
    }
}

fn sample_block(
    rng: &mut StreamRng,
    cells: &[u8],
    grid_n: usize,
    min_block: usize,
    deficit: usize,
) -> CellBlock {
    let lo = min_block.min(deficit);
    for _ in 0..BLOCK_ATTEMPTS {
        let b = propose_block(rng, grid_n, lo, deficit);
        let fresh = newly_filled(cells, grid_n, &b);
        if fresh >= 1 && fresh <= deficit && b.area() >= lo {
            return b;
        }
    }
    for _ in 0..BLOCK_ATTEMPTS {
        let b = propose_block(rng, grid_n, lo, deficit);
        if newly_filled(cells, grid_n, &b) >= 1 {
            return b;
        }
    }
    // Mask nearly full: fall back to a single uncovered cell.
    let open: Vec<usize> = (0..cells.len()).filter(|&i| cells[i] == 1).collect();
    let i = open[rng.random_range(0..open.len())];
    CellBlock {
        top: i / grid_n,
        left: i % grid_n,
        height: 1,
        width: 1,
    }
}

/// Generates a mask of either pattern. `ratio` is the filled (0) fraction.
pub fn gen_mask(pattern: MaskPattern, grid_n: usize, ratio: f64, seed: u64) -> Result<GridMask> {
    match pattern {
        MaskPattern::Discrete => gen_discrete_mask(grid_n, ratio, seed),
        // Degenerate ratios have a single valid mask.
        MaskPattern::Blocked if ratio <= 0.0 => GridMask::from_cells(grid_n, vec![1; grid_n * grid_n], seed),
        MaskPattern::Blocked if ratio >= 1.0 => GridMask::from_cells(grid_n, vec![0; grid_n * grid_n], seed),
        MaskPattern::Blocked => gen_blocked_mask(grid_n, ratio, seed).map(|b| b.mask),
    }
}

/// Fraction of cells equal to 1.
pub fn lambda_of(mask: &GridMask) -> f64 {
    mask.ones() as f64 / mask.cells.len() as f64
}

/// Replicates each cell into an `(H/n) x (W/n)` pixel block.
pub fn expand_to_pixels(mask: &GridMask, height: usize, width: usize) -> Result<PixelMask> {
    let n = mask.grid_n;
    if height == 0 || width == 0 || height % n != 0 || width % n != 0 {
        return Err(Error::invalid(format!(
            "grid {n} does not divide image size {height}x{width}"
        )));
    }
    let (bh, bw) = (height / n, width / n);
    let values = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| mask.get(y / bh, x / bw))
        .collect();
    PixelMask::new(height, width, values)
}

/// Default grid size for square inputs of side `image_size`.
pub fn default_grid_for(image_size: usize) -> usize {
    match image_size {
        0..=32 => 2,
        33..=64 => 4,
        _ => 8,
    }
}
