use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MAX_SIDE: usize = 8;

/// Attribute id ranges shared by every generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrSpace {
    pub shapes: u8,
    pub colors: u8,
    pub sizes: u8,
}

impl Default for AttrSpace {
    fn default() -> Self {
        AttrSpace { shapes: 4, colors: 4, sizes: 4 }
    }
}

impl AttrSpace {
    pub fn range(&self, attr: Attribute) -> u8 {
        match attr {
            Attribute::Shape => self.shapes,
            Attribute::Color => self.colors,
            Attribute::Size => self.sizes,
            Attribute::Count | Attribute::Presence => 0,
        }
    }
}

/// Cell attribute bound by a rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Shape,
    Color,
    Size,
    /// Number of present cells.
    Count,
    /// Presence mask over the grid.
    Presence,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [Attribute::Shape, Attribute::Color, Attribute::Size, Attribute::Count, Attribute::Presence];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Color => "color",
            Attribute::Size => "size",
            Attribute::Count => "count",
            Attribute::Presence => "presence",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Cell {
    pub shape: u8,
    pub color: u8,
    pub size: u8,
    pub present: bool,
}

impl Cell {
    pub const EMPTY: Cell = Cell { shape: 0, color: 0, size: 0, present: false };

    pub fn object(shape: u8, color: u8, size: u8) -> Self {
        Cell { shape, color, size, present: true }
    }

    pub fn get(&self, attr: Attribute) -> u8 {
        match attr {
            Attribute::Shape => self.shape,
            Attribute::Color => self.color,
            Attribute::Size => self.size,
            Attribute::Count | Attribute::Presence => self.present as u8,
        }
    }

    pub fn set(&mut self, attr: Attribute, v: u8) {
        match attr {
            Attribute::Shape => self.shape = v,
            Attribute::Color => self.color = v,
            Attribute::Size => self.size = v,
            Attribute::Count | Attribute::Presence => self.present = v != 0,
        }
    }

    pub fn random_object<R: Rng>(rng: &mut R, space: &AttrSpace) -> Self {
        Cell::object(rng.gen_range(0..space.shapes), rng.gen_range(0..space.colors), rng.gen_range(0..space.sizes))
    }
}

/// A small grid of attributed cells; the stand-in for an image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Panel {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
}

impl fmt::Debug for Panel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Panel{}x{}[", self.height, self.width)?;
        for (i, c) in self.cells.iter().enumerate() {
            if i > 0 && i % self.width == 0 {
                write!(f, "|")?;
            }
            if c.present {
                write!(f, "({}{}{})", c.shape, c.color, c.size)?;
            } else {
                write!(f, "( . )")?;
            }
        }
        write!(f, "]")
    }
}

impl Panel {
    pub fn new(width: usize, height: usize, cells: Vec<Cell>) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(Error::dim(format!("panel {height}x{width} outside 1..={MAX_SIDE}")));
        }
        if cells.len() != width * height {
            return Err(Error::dim(format!("panel {height}x{width} needs {} cells, got {}", width * height, cells.len())));
        }
        Ok(Panel { width, height, cells })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![Cell::EMPTY; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [Cell] {
        &mut self.cells
    }

    pub fn at(&self, r: usize, c: usize) -> &Cell {
        &self.cells[r * self.width + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut Cell {
        &mut self.cells[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| c.present).count()
    }

    /// Presence bits in row-major order, cell 0 in the lowest bit.
    pub fn mask(&self) -> u64 {
        self.cells.iter().enumerate().filter(|(_, c)| c.present).fold(0u64, |m, (i, _)| m | (1 << i))
    }

    /// Checks every id against `space`.
    pub fn validate(&self, space: &AttrSpace) -> Result<()> {
        for (i, c) in self.cells.iter().enumerate() {
            if c.shape >= space.shapes || c.color >= space.colors || c.size >= space.sizes {
                return Err(Error::arg(format!("cell {i} has ids outside the attribute space: {c:?}")));
            }
        }
        Ok(())
    }

    /// Panel-level value of an attribute: the shared id of all present cells
    /// (None when they disagree or nothing is present), the count, or the mask.
    pub fn value(&self, attr: Attribute) -> Option<u64> {
        match attr {
            Attribute::Count => Some(self.count() as u64),
            Attribute::Presence => Some(self.mask()),
            _ => {
                let mut it = self.cells.iter().filter(|c| c.present).map(|c| c.get(attr));
                let first = it.next()?;
                it.all(|v| v == first).then_some(first as u64)
            }
        }
    }

    /// Sets the attribute on every present cell.
    pub fn set_all(&mut self, attr: Attribute, v: u8) {
        for c in self.cells.iter_mut().filter(|c| c.present) {
            c.set(attr, v);
        }
    }

    /// Panel with `count` present cells at random positions.
    pub fn random_with_count<R: Rng>(rng: &mut R, width: usize, height: usize, count: usize, space: &AttrSpace) -> Result<Self> {
        let n = width * height;
        if count > n {
            return Err(Error::Generation(format!("cannot place {count} objects on {n} cells")));
        }
        let mut p = Panel::empty(width, height)?;
        let positions = rand::seq::index::sample(rng, n, count);
        for i in positions.iter() {
            p.cells[i] = Cell::random_object(rng, space);
        }
        Ok(p)
    }

    /// Panel whose presence pattern is `mask`, with random attributes.
    pub fn random_with_mask<R: Rng>(rng: &mut R, width: usize, height: usize, mask: u64, space: &AttrSpace) -> Result<Self> {
        let mut p = Panel::empty(width, height)?;
        for i in 0..width * height {
            if mask >> i & 1 == 1 {
                p.cells[i] = Cell::random_object(rng, space);
            }
        }
        Ok(p)
    }

    /// Mirror image across the vertical axis (columns reversed).
    pub fn reflect_horizontal(&self) -> Panel {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                *out.at_mut(r, c) = *self.at(r, self.width - 1 - c);
            }
        }
        out
    }

    /// Clockwise quarter turn.
    pub fn rotate90(&self) -> Panel {
        let (w, h) = (self.height, self.width);
        let mut cells = vec![Cell::EMPTY; w * h];
        for r in 0..self.height {
            for c in 0..self.width {
                // (r, c) -> (c, height-1-r)
                cells[c * w + (self.height - 1 - r)] = *self.at(r, c);
            }
        }
        Panel { width: w, height: h, cells }
    }

    pub fn to_nested(&self) -> Vec<Vec<[u8; 4]>> {
        (0..self.height)
            .map(|r| {
                (0..self.width)
                    .map(|c| {
                        let x = self.at(r, c);
                        [x.shape, x.color, x.size, x.present as u8]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_nested(rows: &[Vec<[u8; 4]>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::dim("ragged panel rows"));
        }
        let mut cells = Vec::with_capacity(width * height);
        for row in rows {
            for &[s, c, z, p] in row {
                if p > 1 {
                    return Err(Error::arg(format!("presence flag must be 0 or 1, got {p}")));
                }
                cells.push(Cell { shape: s, color: c, size: z, present: p == 1 });
            }
        }
        Panel::new(width, height, cells)
    }
}

impl Serialize for Panel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_nested().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Panel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<[u8; 4]>>::deserialize(d)?;
        Panel::from_nested(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn value_of_uniform_and_mixed_panels() {
        let mut p = Panel::empty(2, 2).unwrap();
        assert_eq!(p.value(Attribute::Shape), None);
        *p.at_mut(0, 0) = Cell::object(2, 1, 0);
        *p.at_mut(1, 1) = Cell::object(2, 3, 0);
        assert_eq!(p.value(Attribute::Shape), Some(2));
        assert_eq!(p.value(Attribute::Color), None);
        assert_eq!(p.value(Attribute::Count), Some(2));
        assert_eq!(p.value(Attribute::Presence), Some(0b1001));
    }

    #[test]
    fn oversize_panel_rejected() {
        assert!(Panel::empty(9, 1).is_err());
        assert!(Panel::new(2, 2, vec![Cell::EMPTY; 3]).is_err());
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Panel::random_with_count(&mut rng, 3, 2, 3, &AttrSpace::default()).unwrap();
        let r = p.rotate90();
        assert_eq!((r.width(), r.height()), (2, 3));
        assert_eq!(r.rotate90().rotate90().rotate90(), p);
        assert_eq!(p.reflect_horizontal().reflect_horizontal(), p);
    }

    #[test]
    fn nested_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Panel::random_with_count(&mut rng, 3, 3, 5, &AttrSpace::default()).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: Panel = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
        assert!(serde_json::from_str::<Panel>("[[[0,0,0,2]]]").is_err());
    }
}
