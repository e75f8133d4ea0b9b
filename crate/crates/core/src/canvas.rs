//! 2×2 prompt/query canvases.
//!
//! Cell order is top-left, top-right, bottom-left, bottom-right. An
//! inference canvas holds `(x, y, x_t, ∅)`; the flipped canvas holds
//! `(x, ∅, x_t, ŷ_t)`. The empty cell is painted mid-gray and masked at
//! patch granularity.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::image::{Image, ImageError, CHANNELS};

/// Pixel value written into the empty cell.
pub const EMPTY_FILL: f32 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanvasError {
    #[error("cell images must share one size, got {0:?}")]
    SizeMismatch(Vec<usize>),
    #[error("cell size {cell} is not a positive multiple of patch size {patch}")]
    PatchMismatch { cell: usize, patch: usize },
    #[error("canvas must have exactly one empty cell, found {0}")]
    EmptyCount(usize),
    #[error("canvas pixel buffer has {got} values, expected {expected}")]
    Malformed { expected: usize, got: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl CellPosition {
    pub const ALL: [CellPosition; 4] = [
        CellPosition::TopLeft,
        CellPosition::TopRight,
        CellPosition::BottomLeft,
        CellPosition::BottomRight,
    ];

    /// (row, column) of the quadrant.
    pub fn quadrant(self) -> (usize, usize) {
        match self {
            CellPosition::TopLeft => (0, 0),
            CellPosition::TopRight => (0, 1),
            CellPosition::BottomLeft => (1, 0),
            CellPosition::BottomRight => (1, 1),
        }
    }

    fn slot(self) -> usize {
        let (r, c) = self.quadrant();
        2 * r + c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Image(Image),
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    cells: [Cell; 4],
    cell_size: usize,
}

/// Patch-level mask for the empty cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub masked: CellPosition,
    pub patch_size: usize,
    /// Patches per canvas side.
    pub grid: usize,
    patches: Arc<[bool]>,
}

impl MaskSpec {
    pub fn new(masked: CellPosition, cell_size: usize, patch_size: usize) -> Result<Self, CanvasError> {
        if patch_size == 0 || cell_size == 0 || cell_size % patch_size != 0 {
            return Err(CanvasError::PatchMismatch {
                cell: cell_size,
                patch: patch_size,
            });
        }
        let per_cell = cell_size / patch_size;
        let grid = 2 * per_cell;
        let (qr, qc) = masked.quadrant();
        let patches = (0..grid * grid)
            .map(|i| (i / grid) / per_cell == qr && (i % grid) / per_cell == qc)
            .collect();
        Ok(Self {
            masked,
            patch_size,
            grid,
            patches,
        })
    }

    /// Row-major flags over the patch grid.
    pub fn patches(&self) -> &Arc<[bool]> {
        &self.patches
    }

    pub fn masked_count(&self) -> usize {
        self.patches.iter().filter(|&&m| m).count()
    }
}

impl Canvas {
    pub fn new(cells: [Cell; 4]) -> Result<Self, CanvasError> {
        let sizes: Vec<usize> = cells
            .iter()
            .filter_map(|c| match c {
                Cell::Image(img) => Some(img.size()),
                Cell::Empty => None,
            })
            .collect();
        let empty = 4 - sizes.len();
        if empty != 1 {
            return Err(CanvasError::EmptyCount(empty));
        }
        if sizes.windows(2).any(|w| w[0] != w[1]) {
            return Err(CanvasError::SizeMismatch(sizes));
        }
        Ok(Self {
            cell_size: sizes[0],
            cells,
        })
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn cell(&self, pos: CellPosition) -> &Cell {
        &self.cells[pos.slot()]
    }

    pub fn empty_position(&self) -> CellPosition {
        CellPosition::ALL
            .into_iter()
            .find(|p| matches!(self.cell(*p), Cell::Empty))
            .expect("constructor guarantees one empty cell")
    }

    pub fn mask(&self, patch_size: usize) -> Result<MaskSpec, CanvasError> {
        MaskSpec::new(self.empty_position(), self.cell_size, patch_size)
    }

    /// Cell contents in slot order, empty cells rendered as [`EMPTY_FILL`].
    pub fn cell_images(&self) -> [Image; 4] {
        let c = self.cell_size;
        std::array::from_fn(|i| match &self.cells[i] {
            Cell::Image(img) => img.clone(),
            Cell::Empty => Image::filled(c, EMPTY_FILL),
        })
    }

    /// `[3, 2C, 2C]` pixel array.
    pub fn pixels(&self) -> Vec<f32> {
        let cells = self.cell_images();
        let mut flat = Vec::with_capacity(4 * cells[0].data().len());
        for img in &cells {
            flat.extend_from_slice(img.data());
        }
        layout_index(self.cell_size).iter().map(|&i| flat[i]).collect()
    }

    pub fn to_image(&self) -> Image {
        Image::new(2 * self.cell_size, self.pixels()).expect("cells are in range")
    }

    /// Copy of this canvas with `img` painted over `pos` (e.g. a prediction in
    /// the empty cell), for dumps.
    pub fn pixels_with(&self, pos: CellPosition, img: &Image) -> Result<Image, CanvasError> {
        if img.size() != self.cell_size {
            return Err(CanvasError::SizeMismatch(vec![self.cell_size, img.size()]));
        }
        let mut cells = self.cells.clone();
        cells[pos.slot()] = Cell::Image(img.clone());
        let c = self.cell_size;
        let mut flat = Vec::with_capacity(4 * CHANNELS * c * c);
        for cell in &cells {
            match cell {
                Cell::Image(i) => flat.extend_from_slice(i.data()),
                Cell::Empty => flat.extend(std::iter::repeat(EMPTY_FILL).take(CHANNELS * c * c)),
            }
        }
        let pixels = layout_index(c).iter().map(|&i| flat[i]).collect();
        Ok(Image::new(2 * c, pixels)?)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        self.to_image().save_ppm(path)
    }
}

fn check_cells(images: &[&Image]) -> Result<(), CanvasError> {
    let sizes: Vec<usize> = images.iter().map(|i| i.size()).collect();
    if sizes.windows(2).any(|w| w[0] != w[1]) {
        return Err(CanvasError::SizeMismatch(sizes));
    }
    Ok(())
}

/// `I = (x, y, x_t, ∅)`, masked at the bottom-right.
pub fn assemble_inference(
    x: &Image,
    y: &Image,
    x_t: &Image,
    patch_size: usize,
) -> Result<(Canvas, MaskSpec), CanvasError> {
    check_cells(&[x, y, x_t])?;
    let canvas = Canvas::new([
        Cell::Image(x.clone()),
        Cell::Image(y.clone()),
        Cell::Image(x_t.clone()),
        Cell::Empty,
    ])?;
    let mask = canvas.mask(patch_size)?;
    Ok((canvas, mask))
}

/// `I′ = (x, ∅, x_t, ŷ_t)`, masked at the top-right. `ŷ_t` is clamped into
/// `[0,1]` first.
pub fn assemble_flipped(
    x: &Image,
    x_t: &Image,
    y_t_hat: &Image,
    patch_size: usize,
) -> Result<(Canvas, MaskSpec), CanvasError> {
    check_cells(&[x, x_t, y_t_hat])?;
    let clamped = Image::from_clamped(y_t_hat.size(), y_t_hat.data().to_vec())?;
    let canvas = Canvas::new([
        Cell::Image(x.clone()),
        Cell::Empty,
        Cell::Image(x_t.clone()),
        Cell::Image(clamped),
    ])?;
    let mask = canvas.mask(patch_size)?;
    Ok((canvas, mask))
}

/// Reads the quadrant at `pos` out of a `[3, 2C, 2C]` array.
pub fn extract_cell(pixels: &[f32], cell_size: usize, pos: CellPosition) -> Result<Image, CanvasError> {
    let expected = CHANNELS * 4 * cell_size * cell_size;
    if pixels.len() != expected || cell_size == 0 {
        return Err(CanvasError::Malformed {
            expected,
            got: pixels.len(),
        });
    }
    let data = extract_index(cell_size, pos).iter().map(|&i| pixels[i]).collect();
    Ok(Image::from_clamped(cell_size, data)?)
}

/// For every canvas element, its index into the slot-order concatenation of
/// the four `[3,C,C]` cells.
pub fn layout_index(cell_size: usize) -> Arc<[usize]> {
    let c = cell_size;
    let side = 2 * c;
    let cell_len = CHANNELS * c * c;
    let mut index = Vec::with_capacity(CHANNELS * side * side);
    for ch in 0..CHANNELS {
        for row in 0..side {
            for col in 0..side {
                let slot = 2 * (row / c) + col / c;
                index.push(slot * cell_len + (ch * c + row % c) * c + col % c);
            }
        }
    }
    index.into()
}

/// Canvas-array indices of the quadrant at `pos`, in `[3,C,C]` order.
pub fn extract_index(cell_size: usize, pos: CellPosition) -> Arc<[usize]> {
    let c = cell_size;
    let side = 2 * c;
    let (qr, qc) = pos.quadrant();
    let mut index = Vec::with_capacity(CHANNELS * c * c);
    for ch in 0..CHANNELS {
        for row in 0..c {
            for col in 0..c {
                index.push((ch * side + qr * c + row) * side + qc * c + col);
            }
        }
    }
    index.into()
}

/// A canvas cell as seen by the differentiable pipeline.
#[derive(Clone, Copy, Debug)]
pub enum CellInput<'a> {
    Image(&'a Image),
    /// A `[3,C,C]` node already on the tape.
    Node(Var),
    Empty,
}

/// Differentiable canvas assembly: returns a `[3, 2C, 2C]` node.
pub fn assemble_on_tape<T: Real>(
    tape: &mut Tape<T>,
    cells: [CellInput<'_>; 4],
    cell_size: usize,
) -> Result<Var, CanvasError> {
    let shape = [CHANNELS, cell_size, cell_size];
    let mut vars = [None; 4];
    for (slot, cell) in cells.iter().enumerate() {
        vars[slot] = Some(match *cell {
            CellInput::Image(img) => {
                if img.size() != cell_size {
                    return Err(CanvasError::SizeMismatch(vec![cell_size, img.size()]));
                }
                tape.constant(img.to_tensor())
            }
            CellInput::Node(v) => {
                if tape.shape(v) != shape {
                    return Err(CanvasError::Tensor(TensorError::ShapeMismatch {
                        op: "assemble",
                        lhs: shape.to_vec(),
                        rhs: tape.shape(v).to_vec(),
                    }));
                }
                v
            }
            CellInput::Empty => tape.constant(Tensor::full(&shape, T::from_f64(EMPTY_FILL as f64))),
        });
    }
    let vars = vars.map(|v| v.expect("all slots filled"));
    let flat = tape.concat(&vars)?;
    Ok(tape.gather(flat, layout_index(cell_size), &[CHANNELS, 2 * cell_size, 2 * cell_size])?)
}

/// Differentiable quadrant read.
pub fn extract_on_tape<T: Real>(
    tape: &mut Tape<T>,
    canvas: Var,
    cell_size: usize,
    pos: CellPosition,
) -> Result<Var, CanvasError> {
    let expected = CHANNELS * 4 * cell_size * cell_size;
    let got = tape.value(canvas).len();
    if got != expected {
        return Err(CanvasError::Malformed { expected, got });
    }
    Ok(tape.gather(canvas, extract_index(cell_size, pos), &[CHANNELS, cell_size, cell_size])?)
}
