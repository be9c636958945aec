//! Templated referring expressions, kept only when their denotation in the
//! scene is exactly the target object.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{rasterize, Color, SceneSpec, Shape};
use crate::error::{Error, Result};

/// Minimum centre separation (pixels) for a spatial comparison to count.
pub const POSITION_MARGIN: f64 = 4.0;
/// The extreme object must beat the runner-up area by this factor.
pub const SIZE_MARGIN: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Colour and shape, or a size superlative.
    Attribute,
    /// An absolute position in the scene.
    Spatial,
    /// Position relative to another uniquely described object.
    Relational,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Attribute, Family::Spatial, Family::Relational];

    pub fn name(self) -> &'static str {
        match self {
            Family::Attribute => "attribute",
            Family::Spatial => "spatial",
            Family::Relational => "relational",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Top,
    Bottom,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Top, Direction::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Top => "top",
            Direction::Bottom => "bottom",
        }
    }

    pub fn relation(self) -> &'static str {
        match self {
            Direction::Left => "left of",
            Direction::Right => "right of",
            Direction::Top => "above",
            Direction::Bottom => "below",
        }
    }

    /// Signed coordinate that grows in this direction.
    fn key(self, cx: f64, cy: f64) -> f64 {
        match self {
            Direction::Left => -cx,
            Direction::Right => cx,
            Direction::Top => -cy,
            Direction::Bottom => cy,
        }
    }
}

/// Every word any template can produce.
pub const GRAMMAR_WORDS: [&str; 20] = [
    "red", "green", "blue", "yellow", "purple", "orange", "circle", "square", "triangle", "on", "the", "left", "right",
    "top", "bottom", "largest", "smallest", "of", "above", "below",
];

/// Mirrors left and right for a horizontally flipped image.
pub fn mirror_expression(text: &str) -> String {
    text.split(' ')
        .map(|w| match w {
            "left" => "right",
            "right" => "left",
            w => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub color: Option<Color>,
    pub shape: Shape,
}

impl Descriptor {
    fn matches(&self, scene: &SceneSpec, i: usize) -> bool {
        let o = &scene.objects[i];
        o.shape == self.shape && self.color.is_none_or(|c| c == o.color)
    }

    fn text(&self) -> String {
        match self.color {
            Some(c) => format!("{} {}", c.name(), self.shape.name()),
            None => self.shape.name().to_string(),
        }
    }

    fn denotation(&self, scene: &SceneSpec) -> Vec<usize> {
        (0..scene.objects.len()).filter(|&i| self.matches(scene, i)).collect()
    }
}

/// A parsed expression in one of the template forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expression {
    Attribute(Descriptor),
    Superlative { largest: bool, shape: Shape },
    Spatial { desc: Descriptor, dir: Direction },
    Relational { desc: Descriptor, dir: Direction, landmark: Descriptor },
}

impl Expression {
    pub fn family(&self) -> Family {
        match self {
            Expression::Attribute(_) | Expression::Superlative { .. } => Family::Attribute,
            Expression::Spatial { .. } => Family::Spatial,
            Expression::Relational { .. } => Family::Relational,
        }
    }

    pub fn text(&self) -> String {
        match self {
            Expression::Attribute(d) => d.text(),
            Expression::Superlative { largest, shape } => {
                format!("{} {}", if *largest { "largest" } else { "smallest" }, shape.name())
            }
            Expression::Spatial { desc, dir } => format!("{} on the {}", desc.text(), dir.word()),
            Expression::Relational { desc, dir, landmark } => {
                format!("{} {} the {}", desc.text(), dir.relation(), landmark.text())
            }
        }
    }

    pub fn parse(text: &str) -> Option<Expression> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if let [s @ ("largest" | "smallest"), shape] = words.as_slice() {
            return Some(Expression::Superlative {
                largest: *s == "largest",
                shape: parse_shape(shape)?,
            });
        }
        let (desc, rest) = parse_descriptor(&words)?;
        match rest {
            [] => Some(Expression::Attribute(desc)),
            ["on", "the", d] => Some(Expression::Spatial {
                desc,
                dir: Direction::ALL.into_iter().find(|x| x.word() == *d)?,
            }),
            _ => {
                let (dir, after) = Direction::ALL.into_iter().find_map(|d| {
                    let rel: Vec<&str> = d.relation().split(' ').collect();
                    rest.strip_prefix(rel.as_slice()).map(|after| (d, after))
                })?;
                let ["the", tail @ ..] = after else { return None };
                let (landmark, []) = parse_descriptor(tail)? else { return None };
                Some(Expression::Relational { desc, dir, landmark })
            }
        }
    }

    /// Objects the expression refers to.
    pub fn denotation(&self, scene: &SceneSpec) -> Vec<usize> {
        match self {
            Expression::Attribute(d) => d.denotation(scene),
            Expression::Superlative { largest, shape } => {
                let cands = Descriptor { color: None, shape: *shape }.denotation(scene);
                if cands.len() < 2 {
                    return Vec::new();
                }
                let mut areas: Vec<(f64, usize)> = cands
                    .iter()
                    .map(|&i| {
                        let a = rasterize(scene, i).count() as f64;
                        (if *largest { a } else { -a }, i)
                    })
                    .collect();
                extreme_with_margin(&mut areas, |best, second| {
                    if *largest {
                        best >= SIZE_MARGIN * second
                    } else {
                        -best * SIZE_MARGIN <= -second
                    }
                })
            }
            Expression::Spatial { desc, dir } => {
                let cands = desc.denotation(scene);
                if cands.len() < 2 {
                    return Vec::new();
                }
                let mut keys: Vec<(f64, usize)> = cands
                    .iter()
                    .map(|&i| (dir.key(scene.objects[i].cx, scene.objects[i].cy), i))
                    .collect();
                extreme_with_margin(&mut keys, |best, second| best - second >= POSITION_MARGIN)
            }
            Expression::Relational { desc, dir, landmark } => {
                let [l] = landmark.denotation(scene)[..] else {
                    return Vec::new();
                };
                let lk = dir.key(scene.objects[l].cx, scene.objects[l].cy);
                let cands: Vec<usize> = desc.denotation(scene).into_iter().filter(|&i| i != l).collect();
                let holds: Vec<usize> = cands
                    .iter()
                    .copied()
                    .filter(|&i| dir.key(scene.objects[i].cx, scene.objects[i].cy) - lk >= POSITION_MARGIN)
                    .collect();
                // Matching objects that are only marginally on the far side
                // make the phrase ambiguous.
                let murky = cands.iter().any(|&i| {
                    let d = dir.key(scene.objects[i].cx, scene.objects[i].cy) - lk;
                    d > 0.0 && d < POSITION_MARGIN
                });
                if murky {
                    Vec::new()
                } else {
                    holds
                }
            }
        }
    }
}

/// The single highest-keyed entry, if it beats the runner-up per `clear`.
fn extreme_with_margin(keys: &mut [(f64, usize)], clear: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    keys.sort_by(|a, b| b.0.total_cmp(&a.0));
    if clear(keys[0].0, keys[1].0) {
        vec![keys[0].1]
    } else {
        Vec::new()
    }
}

fn parse_shape(w: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.name() == w)
}

fn parse_descriptor<'a, 'b>(words: &'a [&'b str]) -> Option<(Descriptor, &'a [&'b str])> {
    match words {
        [c, s, rest @ ..] if Color::ALL.iter().any(|x| x.name() == *c) && parse_shape(s).is_some() => Some((
            Descriptor {
                color: Color::ALL.into_iter().find(|x| x.name() == *c),
                shape: parse_shape(s)?,
            },
            rest,
        )),
        [s, rest @ ..] => Some((
            Descriptor {
                color: None,
                shape: parse_shape(s)?,
            },
            rest,
        )),
        [] => None,
    }
}

/// Every template instance that uniquely denotes `target`.
pub fn valid_expressions(scene: &SceneSpec, target: usize) -> Vec<Expression> {
    let t = &scene.objects[target];
    let full = Descriptor {
        color: Some(t.color),
        shape: t.shape,
    };
    let bare = Descriptor {
        color: None,
        shape: t.shape,
    };
    let mut cands = vec![Expression::Attribute(full)];
    for largest in [true, false] {
        cands.push(Expression::Superlative { largest, shape: t.shape });
    }
    for dir in Direction::ALL {
        for desc in [bare, full] {
            cands.push(Expression::Spatial { desc, dir });
        }
        for (l, lo) in scene.objects.iter().enumerate() {
            if l == target {
                continue;
            }
            let landmark = Descriptor {
                color: Some(lo.color),
                shape: lo.shape,
            };
            for desc in [bare, full] {
                cands.push(Expression::Relational { desc, dir, landmark });
            }
        }
    }
    let mut out: Vec<Expression> = Vec::new();
    for e in cands {
        if e.denotation(scene) == [target] && !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

/// Picks a family uniformly among those with a valid template, then a
/// template within it.
pub fn generate_expression(scene: &SceneSpec, target: usize, rng: &mut ChaCha8Rng) -> Result<Expression> {
    let valid = valid_expressions(scene, target);
    let families: Vec<Family> = Family::ALL
        .into_iter()
        .filter(|f| valid.iter().any(|e| e.family() == *f))
        .collect();
    if families.is_empty() {
        return Err(Error::NoUniqueReference { target });
    }
    let family = families[rng.random_range(0..families.len())];
    let pool: Vec<&Expression> = valid.iter().filter(|e| e.family() == family).collect();
    Ok(*pool[rng.random_range(0..pool.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::SceneObject;

    fn obj(shape: Shape, color: Color, cx: f64, cy: f64, scale: f64) -> SceneObject {
        SceneObject {
            shape,
            color,
            cx,
            cy,
            scale,
        }
    }

    fn scene(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            objects,
            background: [0; 3],
        }
    }

    fn texts(s: &SceneSpec, target: usize) -> Vec<String> {
        valid_expressions(s, target).iter().map(Expression::text).collect()
    }

    #[test]
    fn unique_color_shape_is_valid() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, 15.0, 15.0, 7.0),
            obj(Shape::Square, Color::Blue, 45.0, 45.0, 7.0),
        ]);
        assert!(texts(&s, 0).contains(&"red circle".to_string()));
        let single = scene(vec![obj(Shape::Triangle, Color::Green, 30.0, 30.0, 9.0)]);
        assert!(texts(&single, 0).contains(&"green triangle".to_string()));
    }

    #[test]
    fn duplicate_needs_position() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, 12.0, 30.0, 7.0),
            obj(Shape::Circle, Color::Red, 48.0, 30.0, 7.0),
        ]);
        let t = texts(&s, 0);
        assert!(!t.contains(&"red circle".to_string()));
        assert!(t.contains(&"red circle on the left".to_string()));
        assert!(!t.contains(&"red circle on the right".to_string()));
        assert_eq!(Expression::parse("red circle").unwrap().denotation(&s), vec![0, 1]);
    }

    #[test]
    fn relational_and_superlative_denotations() {
        let s = scene(vec![
            obj(Shape::Square, Color::Yellow, 12.0, 20.0, 6.0),
            obj(Shape::Square, Color::Yellow, 50.0, 20.0, 11.0),
            obj(Shape::Circle, Color::Purple, 30.0, 50.0, 8.0),
        ]);
        let e = Expression::parse("yellow square left of the purple circle").unwrap();
        assert_eq!(e.family(), Family::Relational);
        assert_eq!(e.denotation(&s), vec![0]);
        assert_eq!(Expression::parse("largest square").unwrap().denotation(&s), vec![1]);
        assert_eq!(Expression::parse("smallest square").unwrap().denotation(&s), vec![0]);
        assert_eq!(Expression::parse("square above the purple circle").unwrap().denotation(&s), vec![0, 1]);
        assert!(Expression::parse("largest circle").unwrap().denotation(&s).is_empty());
    }

    #[test]
    fn text_parse_round_trip_and_mirroring() {
        for text in [
            "red circle",
            "circle on the top",
            "blue square on the left",
            "largest triangle",
            "square below the green circle",
            "orange triangle right of the red square",
        ] {
            assert_eq!(Expression::parse(text).unwrap().text(), text);
        }
        assert!(Expression::parse("red").is_none());
        assert_eq!(mirror_expression("circle left of the red square"), "circle right of the red square");
        assert_eq!(mirror_expression("square on the right"), "square on the left");
    }

    #[test]
    fn every_template_word_is_in_the_grammar() {
        let e = [
            "red green blue yellow purple orange circle square triangle",
            "on the left right top bottom largest smallest of above below",
        ];
        let words: Vec<&str> = e.iter().flat_map(|s| s.split(' ')).collect();
        assert_eq!(words, GRAMMAR_WORDS.to_vec());
    }
}
