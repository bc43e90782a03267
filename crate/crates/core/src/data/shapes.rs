use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_seed, LabelMap, Sample};
use crate::error::{config_err, Result};
use crate::exec::Exec;
use crate::tensor::{FeatureMap, Tensor};

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.90],
    [0.90, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.50, 0.20, 0.70],
];

/// Base color of a foreground class (class ids start at 1).
fn class_color(class: usize) -> [f64; 3] {
    if class - 1 < PALETTE.len() {
        return PALETTE[class - 1];
    }
    // golden-angle hues past the fixed palette
    let hue = ((class as f64) * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Line { y0: f64, x0: f64, dy: f64, dx: f64, len: f64, half_width: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let max = (side / 2.0).max(3.0);
        let mut size = || (rng.gen_range(3f64.ln()..=max.ln())).exp();
        let (a, b) = (size(), size());
        match rng.gen_range(0..10) {
            0..=3 => {
                let y0 = rng.gen_range(0.0..(h as f64 - a).max(1.0));
                let x0 = rng.gen_range(0.0..(w as f64 - b).max(1.0));
                Shape::Rect { y0, x0, y1: y0 + a, x1: x0 + b }
            }
            4..=7 => Shape::Ellipse {
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                ry: a / 2.0,
                rx: b / 2.0,
            },
            _ => {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                Shape::Line {
                    y0: rng.gen_range(0.0..h as f64),
                    x0: rng.gen_range(0.0..w as f64),
                    dy: theta.sin(),
                    dx: theta.cos(),
                    len: rng.gen_range(side / 4.0..=side / 2.0),
                    half_width: rng.gen_range(1.0..=1.5),
                }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (u, v) = ((y - cy) / ry, (x - cx) / rx);
                u * u + v * v <= 1.0
            }
            Shape::Line { y0, x0, dy, dx, len, half_width } => {
                let (py, px) = (y - y0, x - x0);
                let along = py * dy + px * dx;
                let across = (px * dy - py * dx).abs();
                along >= 0.0 && along <= len && across <= half_width
            }
        }
    }
}

fn generate_one(index: usize, (h, w): (usize, usize), num_classes: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index as u64, u64::MAX));
    let base: f64 = rng.gen_range(0.35..0.65);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    let (fy, fx, phase) = (
        rng.gen_range(0.02..0.2),
        rng.gen_range(0.02..0.2),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let texture = 0.08 * ((y as f64 * fy + x as f64 * fx + phase).sin());
            for c in 0..3 {
                img[(c * h + y) * w + x] = base + tint[c] + texture;
            }
        }
    }
    let mut label = vec![0u8; h * w];
    let count = rng.gen_range(2..=5);
    for _ in 0..count {
        let class = rng.gen_range(1..num_classes);
        let color = class_color(class);
        let jitter: [f64; 3] = std::array::from_fn(|c| color[c] + rng.gen_range(-0.08..0.08));
        let shape = Shape::random(&mut rng, h, w);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    label[y * w + x] = class as u8;
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = jitter[c];
                    }
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    let image = FeatureMap::new(Tensor::new(vec![1, 3, h, w], img).expect("sized above")).expect("positive dims");
    Sample {
        image,
        label: LabelMap { height: h, width: w, data: label },
    }
}

/// Deterministic per `seed`: colored rectangles, ellipses and thin lines on a
/// textured background, one color family per class, exact label masks.
/// Shape extents range from 3 pixels to half the shorter image side.
pub fn generate_shapes(n: usize, size: (usize, usize), num_classes: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(config_err("number of samples must be positive"));
    }
    if !(2..=256).contains(&num_classes) {
        return Err(config_err(format!("num_classes must be in 2..=256, got {num_classes}")));
    }
    if size.0 < 4 || size.1 < 4 {
        return Err(config_err(format!("image size {size:?} is too small")));
    }
    Ok(Exec::default().map(n, |i| generate_one(i, size, num_classes, seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = generate_shapes(5, (32, 40), 4, 9).unwrap();
        let b = generate_shapes(5, (32, 40), 4, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_shapes(5, (32, 40), 4, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_ranges() {
        let s = generate_shapes(3, (24, 16), 3, 1).unwrap();
        for x in &s {
            assert_eq!(x.image.tensor().shape(), &[1, 3, 24, 16]);
            assert_eq!(x.dims(), (24, 16));
            assert!(x.image.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
            x.validate_labels(3).unwrap();
        }
    }

    #[test]
    fn rejects_empty_request() {
        assert!(generate_shapes(0, (32, 32), 2, 0).is_err());
        assert!(generate_shapes(1, (32, 32), 1, 0).is_err());
    }

    #[test]
    fn palette_extends_past_fixed_colors() {
        for c in 1..20 {
            assert!(class_color(c).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
