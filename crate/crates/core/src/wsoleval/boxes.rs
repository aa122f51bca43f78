use crate::cam::LocalizationMap;
use crate::error::{arg_err, Result};

/// Pixel box with inclusive `(x0, y0)` and exclusive `(x1, y1)` corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(arg_err!("empty box ({x0},{y0},{x1},{y1})"));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

/// `|a ∩ b| / |a ∪ b|` over pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Binary `H×W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(arg_err!("mask data has {} entries for {height}×{width}", data.len()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Smallest box covering every set pixel, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                        Some(b) => BBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x + 1),
                            y1: b.y1.max(y + 1),
                        },
                    });
                }
            }
        }
        b
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(arg_err!("connectivity must be 4 or 8, got {n}")),
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// One connected foreground region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub bbox: BBox,
    pub area: usize,
}

/// Connected components of `{values ≥ tau}` in order of their first pixel in scan order.
pub fn components(values: &[f64], height: usize, width: usize, tau: f64, conn: Connectivity) -> Vec<Component> {
    debug_assert_eq!(values.len(), height * width);
    let mut seen = vec![false; values.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..values.len() {
        if seen[start] || !(values[start] >= tau) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for &(dy, dx) in conn.offsets() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if !seen[q] && values[q] >= tau {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        out.push(Component {
            bbox: BBox { x0, y0, x1, y1 },
            area,
        });
    }
    out
}

/// Tight boxes of every connected region of `H ≥ tau`.
pub fn extract_boxes(map: &LocalizationMap, tau: f64, conn: Connectivity) -> Vec<BBox> {
    components(map.values().data(), map.height(), map.width(), tau, conn)
        .into_iter()
        .map(|c| c.bbox)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    fn map(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> LocalizationMap {
        let data = (0..h * w).map(|i| if on(i / w, i % w) { 1.0 } else { 0.0 }).collect();
        LocalizationMap::new(Tensor::new([h, w], data).unwrap(), 0, "m").unwrap()
    }

    #[test]
    fn empty_map_has_no_boxes() {
        let m = map(6, 6, |_, _| false);
        assert!(extract_boxes(&m, 0.5, Connectivity::Eight).is_empty());
    }

    #[test]
    fn single_rectangle() {
        let m = map(10, 10, |y, x| (2..=4).contains(&y) && (3..=6).contains(&x));
        let b = extract_boxes(&m, 0.5, Connectivity::Eight);
        assert_eq!(b, vec![BBox { x0: 3, y0: 2, x1: 7, y1: 5 }]);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = map(4, 4, |y, x| (y, x) == (1, 1) || (y, x) == (2, 2));
        assert_eq!(extract_boxes(&m, 0.5, Connectivity::Eight).len(), 1);
        assert_eq!(extract_boxes(&m, 0.5, Connectivity::Four).len(), 2);
    }

    #[test]
    fn component_areas() {
        let m = map(5, 5, |y, x| x == 0 || (y == 4 && x == 4));
        let c = components(m.values().data(), 5, 5, 0.5, Connectivity::Eight);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].area, 5);
        assert_eq!(c[1].area, 1);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(20, 20, 30, 30).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
        let b = BBox::new(5, 0, 15, 10).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert!(BBox::new(3, 0, 3, 1).is_err());
    }

    #[test]
    fn tight_box_of_mask() {
        let mut data = vec![false; 30];
        data[2 * 6 + 1] = true;
        data[4 * 6 + 3] = true;
        let m = Mask::new(5, 6, data).unwrap();
        assert_eq!(m.tight_box(), Some(BBox { x0: 1, y0: 2, x1: 4, y1: 5 }));
        assert_eq!(Mask::new(2, 2, vec![false; 4]).unwrap().tight_box(), None);
    }
}
