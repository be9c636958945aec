//! Scenes of coloured shapes and their exact rasterization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Largest allowed overlap as a fraction of the smaller object's area.
pub const MAX_OVERLAP: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 190],
            Color::Orange => [240, 140, 30],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Centre in pixel coordinates (x right, y down).
    pub cx: f64,
    pub cy: f64,
    /// Radius, half side, or half base depending on the shape.
    pub scale: f64,
}

impl SceneObject {
    /// Whether the point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.scale);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r).
            Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// `(x0, y0, x1, y1)` bounds.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let r = self.scale;
        (self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub background: [u8; 3],
}

/// Pixel-centre rasterization of one object (no anti-aliasing).
pub fn rasterize(scene: &SceneSpec, index: usize) -> BinaryMask {
    let obj = &scene.objects[index];
    let mut m = BinaryMask::empty(scene.height, scene.width);
    let (x0, y0, x1, y1) = obj.bounds();
    let ys = (y0.floor().max(0.0) as usize)..((y1.ceil() as usize).min(scene.height));
    for y in ys {
        for x in (x0.floor().max(0.0) as usize)..((x1.ceil() as usize).min(scene.width)) {
            if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn overlap_fraction(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let smaller = a.count().min(b.count()).max(1);
    inter as f64 / smaller as f64
}

/// The range of object sizes for a canvas, as radii in pixels.
pub fn scale_range(height: usize, width: usize) -> (f64, f64) {
    let side = height.min(width) as f64;
    (side * 0.09, side * 0.2)
}

/// Rejection-samples 2 to 6 objects that lie inside the canvas and overlap
/// by at most [`MAX_OVERLAP`].
pub fn generate_scene(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Result<SceneSpec> {
    let count = rng.random_range(2..=6);
    let grey = rng.random_range(20..=70u8);
    let mut scene = SceneSpec {
        height,
        width,
        objects: Vec::with_capacity(count),
        background: [grey, grey, grey],
    };
    let (lo, hi) = scale_range(height, width);
    let mut masks: Vec<BinaryMask> = Vec::with_capacity(count);
    let mut rejected = 0;
    while scene.objects.len() < count {
        let r = rng.random_range(lo..hi);
        if 2.0 * r >= height.min(width) as f64 {
            return Err(Error::Placement { attempts: rejected });
        }
        let obj = SceneObject {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            cx: rng.random_range(r..width as f64 - r),
            cy: rng.random_range(r..height as f64 - r),
            scale: r,
        };
        scene.objects.push(obj);
        let mask = rasterize(&scene, scene.objects.len() - 1);
        if mask.count() > 0 && masks.iter().all(|m| overlap_fraction(m, &mask) <= MAX_OVERLAP) {
            masks.push(mask);
        } else {
            scene.objects.pop();
            rejected += 1;
            if rejected >= MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Placement { attempts: rejected });
            }
        }
    }
    Ok(scene)
}

/// RGB pixels, row-major; `on_top` is drawn last so it is never occluded.
pub fn render(scene: &SceneSpec, on_top: Option<usize>) -> Vec<u8> {
    let mut px = Vec::with_capacity(scene.height * scene.width * 3);
    for _ in 0..scene.height * scene.width {
        px.extend_from_slice(&scene.background);
    }
    let order = (0..scene.objects.len())
        .filter(|&i| Some(i) != on_top)
        .chain(on_top);
    for i in order {
        let mask = rasterize(scene, i);
        let rgb = scene.objects[i].color.rgb();
        for (k, _) in mask.data.iter().enumerate().filter(|(_, &v)| v) {
            px[3 * k..3 * k + 3].copy_from_slice(&rgb);
        }
    }
    px
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use std::collections::HashSet;

    use super::*;

    fn object(shape: Shape, cx: f64, cy: f64, scale: f64) -> SceneObject {
        SceneObject {
            shape,
            color: Color::Red,
            cx,
            cy,
            scale,
        }
    }

    fn scene(objects: Vec<SceneObject>, side: usize) -> SceneSpec {
        SceneSpec {
            height: side,
            width: side,
            objects,
            background: [0; 3],
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&mut ChaCha8Rng::seed_from_u64(0), 64, 64).unwrap();
        let b = generate_scene(&mut ChaCha8Rng::seed_from_u64(0), 64, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invariants_hold_over_many_seeds() {
        let mut shapes = HashSet::new();
        let mut colors = HashSet::new();
        for seed in 0..1000 {
            let s = generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), 64, 64).unwrap();
            assert!((2..=6).contains(&s.objects.len()));
            let masks: Vec<_> = (0..s.objects.len()).map(|i| rasterize(&s, i)).collect();
            for (i, o) in s.objects.iter().enumerate() {
                let (x0, y0, x1, y1) = o.bounds();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 64.0 && y1 <= 64.0);
                shapes.insert(o.shape);
                colors.insert(o.color);
                for j in 0..i {
                    assert!(overlap_fraction(&masks[i], &masks[j]) <= MAX_OVERLAP);
                }
            }
        }
        assert_eq!(shapes.len(), 3);
        assert_eq!(colors.len(), 6);
    }

    #[test]
    fn full_canvas_square_fills_mask() {
        let s = scene(vec![object(Shape::Square, 32.0, 32.0, 32.0)], 64);
        assert_eq!(rasterize(&s, 0).count(), 64 * 64);
    }

    #[test]
    fn circle_area_matches_formula() {
        for r in [8.0, 11.5, 20.0] {
            let s = scene(vec![object(Shape::Circle, 32.0, 32.0, r)], 64);
            let area = rasterize(&s, 0).count() as f64;
            let want = std::f64::consts::PI * r * r;
            assert!((area - want).abs() / want < 0.04, "r={r}: {area} vs {want}");
        }
        let s = scene(vec![object(Shape::Triangle, 32.0, 32.0, 16.0)], 64);
        let area = rasterize(&s, 0).count() as f64;
        assert!((area - 2.0 * 256.0).abs() / 512.0 < 0.05);
    }

    #[test]
    fn disjoint_objects_have_disjoint_masks() {
        let s = scene(
            vec![object(Shape::Circle, 10.0, 10.0, 8.0), object(Shape::Triangle, 40.0, 40.0, 10.0)],
            64,
        );
        let (a, b) = (rasterize(&s, 0), rasterize(&s, 1));
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| !(*x && *y)));
    }

    #[test]
    fn target_drawn_on_top() {
        let mut s = scene(
            vec![object(Shape::Square, 20.0, 20.0, 10.0), object(Shape::Square, 26.0, 20.0, 10.0)],
            64,
        );
        s.objects[1].color = Color::Blue;
        let px = render(&s, Some(0));
        let k = 20 * 64 + 25;
        assert_eq!(&px[3 * k..3 * k + 3], &Color::Red.rgb());
    }
}
