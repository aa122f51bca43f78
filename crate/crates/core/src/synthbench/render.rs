use rand::Rng;

/// Foreground shapes; a class is one shape in one base colour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Annulus,
}

pub const SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Annulus];

pub const BASE_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.20, 0.15],
    [0.15, 0.70, 0.25],
    [0.20, 0.35, 0.90],
    [0.90, 0.80, 0.15],
    [0.75, 0.20, 0.75],
    [0.15, 0.75, 0.80],
];

pub const MAX_CLASSES: usize = SHAPES.len() * BASE_COLORS.len();

pub fn class_shape(class: usize) -> Shape {
    SHAPES[class % SHAPES.len()]
}

pub fn class_color(class: usize) -> [f64; 3] {
    BASE_COLORS[class / SHAPES.len() % BASE_COLORS.len()]
}

/// A saturated colour unique to `class` among `classes`.
pub fn marker_color(class: usize, classes: usize) -> [f64; 3] {
    hsv((class as f64 + 0.5) / classes as f64, 1.0, 1.0)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Planar RGB canvas, values in `[0, 1]`.
pub struct Canvas {
    pub rgb: Vec<[f64; 3]>,
}

impl Canvas {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub enum Texture {
    ValueNoise { cell: usize, a: [f64; 3], b: [f64; 3], lattice: Vec<f64>, span: usize },
    Stripes { period: f64, angle: f64, phase: f64, a: [f64; 3], b: [f64; 3] },
}

/// Dark colour of any hue, so masking the background to black barely changes it.
fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    hsv(rng.gen(), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.35))
}

impl Texture {
    pub fn random<R: Rng>(rng: &mut R, size: usize) -> Texture {
        let (a, b) = (random_color(rng), random_color(rng));
        if rng.gen_bool(0.5) {
            let cell = rng.gen_range(4..=16);
            let span = size / cell + 2;
            let lattice = (0..span * span).map(|_| rng.gen()).collect();
            Texture::ValueNoise { cell, a, b, lattice, span }
        } else {
            Texture::Stripes {
                period: rng.gen_range(6.0..20.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                a,
                b,
            }
        }
    }

    pub fn sample(&self, x: usize, y: usize) -> [f64; 3] {
        let (t, a, b) = match self {
            Texture::ValueNoise { cell, a, b, lattice, span } => {
                let (fx, fy) = (x as f64 / *cell as f64, y as f64 / *cell as f64);
                let (ix, iy) = (fx as usize, fy as usize);
                let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let l = |i: usize, j: usize| lattice[j * span + i];
                let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                (top * (1.0 - ty) + bot * ty, a, b)
            }
            Texture::Stripes { period, angle, phase, a, b } => {
                let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                (0.5 + 0.5 * (std::f64::consts::TAU * u / period + phase).sin(), a, b)
            }
        };
        [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Placement of one object: centre and bounding extent in pixels.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub extent: f64,
}

/// Whether the pixel centre `(x + ½, y + ½)` lies inside `shape` at `p`.
pub fn covers(shape: Shape, p: &Placement, x: usize, y: usize) -> bool {
    let (dx, dy) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
    let r = p.extent / 2.0;
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => {
            let depth = dy + r;
            (0.0..=p.extent).contains(&depth) && dx.abs() <= depth / 2.0
        }
        Shape::Annulus => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.25 * r * r
        }
    }
}
