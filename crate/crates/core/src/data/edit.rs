use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{
    class_color, class_index, class_shape, coverage, hard_inside, object_side_range, place_box,
    render_background, render_scene, rng_for, BBox, SceneSpec, Shape, COLOR_NAMES, NOUNS, SOURCE_NOISE,
};
use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, RgbImage};

pub const VERBS: [&str; 6] = ["edit", "change", "turn", "replace", "remove", "add"];
pub const BACKGROUND: &str = "background";

/// Largest allowed fraction of edited pixels.
pub const MAX_MASK_FRACTION: f64 = 0.5;

/// Pixels whose channels move by more than this count as changed.
pub const CHANGE_TOLERANCE: f64 = 1.0 / 255.0;

/// Noise of family-B fills; spatially smoothed, so its spectrum differs from
/// the i.i.d. sensor noise of the source.
const FAMILY_B_NOISE: f64 = 0.035;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// Hard-edged paste with grain matched to the source; removed objects
    /// are filled with smooth background.
    A,
    /// Feathered alpha blend with smoothed texture noise.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Replace,
    Recolor,
    Remove,
    Insert,
}

impl EditOp {
    pub fn verbs(self) -> &'static [&'static str] {
        match self {
            EditOp::Replace => &VERBS[..4],
            EditOp::Recolor => &VERBS[..3],
            EditOp::Remove => &VERBS[4..5],
            EditOp::Insert => &VERBS[5..6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub family: Family,
    pub op: EditOp,
    pub verb: String,
    pub original_object: String,
    pub edited_object: String,
    pub target_region: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditedSample {
    pub id: String,
    /// The edited image.
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub instruction: String,
    pub family: Family,
    pub seed: u64,
    /// The authentic image the edit was applied to, when generated in-process.
    pub source: Option<RgbImage>,
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// `<verb> <original> to <edited>`, or the `replace a(n) X with a(n) Y`
/// phrasing when the verb is `replace`.
pub fn render_instruction(edit: &EditSpec) -> String {
    if edit.verb == "replace" {
        format!(
            "replace {} {} with {} {}",
            article(&edit.original_object),
            edit.original_object,
            article(&edit.edited_object),
            edit.edited_object
        )
    } else {
        format!("{} {} to {}", edit.verb, edit.original_object, edit.edited_object)
    }
}

fn named_color(name: &str) -> Option<[f64; 3]> {
    COLOR_NAMES.iter().find(|(n, _)| *n == name).map(|&(_, c)| c)
}

/// What gets painted: a shape in a color, in a box.
#[derive(Debug, Clone, Copy)]
struct Paint {
    shape: Shape,
    color: [f64; 3],
    bbox: BBox,
}

/// Resolves the edit against the scene: which object is erased and what is
/// painted. Recolors that would not change the object are re-drawn.
fn resolve(scene: &SceneSpec, edit: &mut EditSpec, rng: &mut impl Rng) -> Result<(Option<usize>, Option<Paint>)> {
    if !edit.target_region.within(scene.height, scene.width) {
        return Err(invalid!("target region {:?} outside the image", edit.target_region));
    }
    let source = if edit.op == EditOp::Insert {
        None
    } else {
        let idx = scene
            .objects
            .iter()
            .position(|o| o.class == edit.original_object)
            .ok_or_else(|| Error::MissingObject(edit.original_object.clone()))?;
        Some(idx)
    };
    let paint = match edit.op {
        EditOp::Remove => None,
        EditOp::Replace | EditOp::Insert => {
            let class = class_index(&edit.edited_object)
                .ok_or_else(|| invalid!("unknown class `{}`", edit.edited_object))?;
            Some(Paint {
                shape: class_shape(class),
                color: class_color(class),
                bbox: edit.target_region,
            })
        }
        EditOp::Recolor => {
            let obj = &scene.objects[source.expect("recolor has a source")];
            let name = edit
                .edited_object
                .split_whitespace()
                .next()
                .unwrap_or_default()
                .to_string();
            let mut color = named_color(&name).ok_or_else(|| invalid!("unknown color `{name}`"))?;
            if color == obj.color {
                let options: Vec<_> = COLOR_NAMES.iter().filter(|(_, c)| *c != obj.color).collect();
                let &&(n, c) = options.choose(rng).expect("palette has alternatives");
                color = c;
                edit.edited_object = format!("{n} {}", obj.class);
            }
            Some(Paint {
                shape: obj.shape,
                color,
                bbox: obj.bbox,
            })
        }
    };
    Ok((source, paint))
}

fn box_blur(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut s = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                s += a[[yy, xx]];
                n += 1.0;
            }
        }
        s / n
    })
}

/// 3×3 dilation followed by 3×3 erosion; pixels outside the image count as
/// unset for dilation and set for erosion.
pub fn close3x3(m: &BinaryMask) -> BinaryMask {
    let (h, w) = m.dim();
    let dil = BinaryMask::from_fn(h, w, |y, x| {
        (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| m.get(yy, xx)))
    });
    BinaryMask::from_fn(h, w, |y, x| {
        (y.saturating_sub(1)..(y + 2).min(h)).all(|yy| (x.saturating_sub(1)..(x + 2).min(w)).all(|xx| dil.get(yy, xx)))
    })
}

/// Pixels where any channel moved by more than [`CHANGE_TOLERANCE`].
pub fn changed_pixels(a: &RgbImage, b: &RgbImage) -> BinaryMask {
    BinaryMask::from_fn(a.height(), a.width(), |y, x| {
        (0..3).any(|k| (a.0[[y, x, k]] - b.0[[y, x, k]]).abs() > CHANGE_TOLERANCE + 1e-9)
    })
}

pub fn apply_edit(scene: &SceneSpec, edit: &EditSpec, seed: u64) -> Result<EditedSample> {
    let mut edit = edit.clone();
    let mut rng = rng_for(seed, 2);
    let (source_idx, paint) = resolve(scene, &mut edit, &mut rng)?;
    let (h, w) = (scene.height, scene.width);
    let source = render_scene(scene);
    let clean = render_background(scene);

    let mut content = clean.clone();
    let mut alpha = Array2::<f64>::zeros((h, w));
    if let Some(idx) = source_idx {
        let obj = &scene.objects[idx];
        for y in 0..h {
            for x in 0..w {
                if coverage(obj.shape, &obj.bbox, y, x) > 0.0 {
                    alpha[[y, x]] = 1.0;
                }
            }
        }
    }
    // pasted objects carry grain matched to the source sensor noise
    let grain = Normal::new(0.0, SOURCE_NOISE).expect("valid sigma");
    if let Some(p) = paint {
        for y in 0..h {
            for x in 0..w {
                let a = match edit.family {
                    Family::A => hard_inside(p.shape, &p.bbox, y, x) as u8 as f64,
                    Family::B => coverage(p.shape, &p.bbox, y, x),
                };
                if a > 0.0 {
                    for k in 0..3 {
                        let v = &mut content.0[[y, x, k]];
                        *v = *v * (1.0 - a) + p.color[k] * a;
                        if edit.family == Family::A {
                            *v += grain.sample(&mut rng);
                        }
                    }
                    alpha[[y, x]] = 1.0;
                }
            }
        }
    }
    if edit.family == Family::B {
        alpha = box_blur(&box_blur(&alpha));
        let noise = Normal::new(0.0, FAMILY_B_NOISE).expect("valid sigma");
        let mut grain = Array2::from_shape_fn((h, w), |_| noise.sample(&mut rng));
        grain = box_blur(&grain) * 3.0;
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    content.0[[y, x, k]] += grain[[y, x]];
                }
            }
        }
    }

    let mut image = source.clone();
    for y in 0..h {
        for x in 0..w {
            let a = alpha[[y, x]];
            if a > 0.0 {
                for k in 0..3 {
                    let v = &mut image.0[[y, x, k]];
                    *v = *v * (1.0 - a) + content.0[[y, x, k]] * a;
                }
            }
        }
    }
    image.quantize();

    let mask = close3x3(&changed_pixels(&source, &image));
    let count = mask.count();
    if count == 0 {
        return Err(invalid!("edit changed no pixels"));
    }
    if count as f64 > MAX_MASK_FRACTION * (h * w) as f64 {
        return Err(invalid!("edit covers {count} of {} pixels", h * w));
    }
    Ok(EditedSample {
        id: format!("s{seed}"),
        image,
        mask,
        instruction: render_instruction(&edit),
        family: edit.family,
        seed,
        source: Some(source),
    })
}

/// Draws a random edit of the given family that is valid for the scene.
pub fn sample_edit(scene: &SceneSpec, family: Family, seed: u64) -> Result<EditSpec> {
    let mut rng = rng_for(seed, 3);
    let taken: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let absent: Vec<usize> = (0..NOUNS.len())
        .filter(|&c| scene.objects.iter().all(|o| o.class != NOUNS[c]))
        .collect();
    for _ in 0..32 {
        let op = match rng.random_range(0..4) {
            0 => EditOp::Replace,
            1 => EditOp::Recolor,
            2 => EditOp::Remove,
            _ => EditOp::Insert,
        };
        let verb = op.verbs().choose(&mut rng).expect("nonempty").to_string();
        let obj = scene.objects.choose(&mut rng).expect("scene has objects");
        let spec = match op {
            EditOp::Replace => {
                let &class = absent.choose(&mut rng).expect("16 classes exceed 5 objects");
                EditSpec {
                    family,
                    op,
                    verb,
                    original_object: obj.class.clone(),
                    edited_object: NOUNS[class].to_string(),
                    target_region: obj.bbox,
                }
            }
            EditOp::Recolor => {
                let options: Vec<_> = COLOR_NAMES.iter().filter(|(_, c)| *c != obj.color).collect();
                let &&(name, _) = options.choose(&mut rng).expect("palette");
                EditSpec {
                    family,
                    op,
                    verb,
                    original_object: obj.class.clone(),
                    edited_object: format!("{name} {}", obj.class),
                    target_region: obj.bbox,
                }
            }
            EditOp::Remove => EditSpec {
                family,
                op,
                verb,
                original_object: obj.class.clone(),
                edited_object: BACKGROUND.to_string(),
                target_region: obj.bbox,
            },
            EditOp::Insert => {
                let &class = absent.choose(&mut rng).expect("absent classes");
                let (lo, hi) = object_side_range(scene.height, scene.width);
                let bw = rng.random_range(lo..=hi);
                let bh = rng.random_range(lo..=hi);
                let Some(bbox) = place_box(&mut rng, scene.height, scene.width, bw, bh, &taken, 2) else {
                    continue;
                };
                EditSpec {
                    family,
                    op,
                    verb,
                    original_object: BACKGROUND.to_string(),
                    edited_object: NOUNS[class].to_string(),
                    target_region: bbox,
                }
            }
        };
        return Ok(spec);
    }
    Err(invalid!("no valid edit found for scene {}", scene.seed))
}

#[cfg(test)]
mod tests {
    use super::super::scene::{generate_scene, Background, SceneObject};
    use super::*;

    fn spec(verb: &str, op: EditOp, orig: &str, edited: &str) -> EditSpec {
        EditSpec {
            family: Family::A,
            op,
            verb: verb.into(),
            original_object: orig.into(),
            edited_object: edited.into(),
            target_region: BBox {
                x0: 0,
                y0: 0,
                x1: 4,
                y1: 4,
            },
        }
    }

    #[test]
    fn instruction_templates() {
        assert_eq!(render_instruction(&spec("edit", EditOp::Replace, "dog", "cat")), "edit dog to cat");
        assert_eq!(
            render_instruction(&spec("replace", EditOp::Replace, "apple", "orange")),
            "replace an apple with an orange"
        );
        assert_eq!(
            render_instruction(&spec("remove", EditOp::Remove, "circle", "background")),
            "remove circle to background"
        );
    }

    fn one_rect_scene(color: [f64; 3]) -> SceneSpec {
        SceneSpec {
            seed: 11,
            height: 32,
            width: 32,
            objects: vec![SceneObject {
                shape: Shape::Rect,
                class: "book".into(),
                color,
                bbox: BBox {
                    x0: 10,
                    y0: 12,
                    x1: 20,
                    y1: 22,
                },
            }],
            background: Background {
                texture: 0,
                base: [0.4, 0.5, 0.6],
                accent: [0.6, 0.5, 0.4],
                frequency: 1.0,
                phase: 0.0,
            },
        }
    }

    #[test]
    fn recolor_of_small_rect_matches_pixel_diff() {
        let scene = one_rect_scene([0.2, 0.7, 0.3]);
        let mut e = spec("change", EditOp::Recolor, "book", "red book");
        e.target_region = scene.objects[0].bbox;
        let s = apply_edit(&scene, &e, 5).unwrap();
        let source = s.source.as_ref().unwrap();
        let oracle = close3x3(&changed_pixels(source, &s.image));
        assert_eq!(s.mask, oracle);
        assert!((100..=144).contains(&s.mask.count()), "{}", s.mask.count());
        assert_eq!(s.instruction, "change book to red book");
    }

    #[test]
    fn degenerate_recolor_is_resampled() {
        let scene = one_rect_scene(COLOR_NAMES[0].1);
        let mut e = spec("edit", EditOp::Recolor, "book", "red book");
        e.target_region = scene.objects[0].bbox;
        let s = apply_edit(&scene, &e, 3).unwrap();
        assert!(s.mask.count() > 0);
        assert_ne!(s.instruction, "edit book to red book");
    }

    #[test]
    fn missing_object_is_an_error() {
        let scene = one_rect_scene([0.2, 0.7, 0.3]);
        let e = spec("remove", EditOp::Remove, "dog", "background");
        assert!(matches!(apply_edit(&scene, &e, 0), Err(Error::MissingObject(_))));
    }

    #[test]
    fn closing_fills_single_hole() {
        let mut m = BinaryMask::from_fn(9, 9, |y, x| (2..7).contains(&y) && (2..7).contains(&x));
        m.0[[4, 4]] = 0;
        let c = close3x3(&m);
        assert!(c.get(4, 4));
        assert_eq!(c.count(), 25);
    }

    #[test]
    fn mask_matches_diff_for_both_families() {
        for seed in 0..40u64 {
            let scene = generate_scene(seed, 64, 64).unwrap();
            for family in [Family::A, Family::B] {
                let e = sample_edit(&scene, family, seed).unwrap();
                let s = apply_edit(&scene, &e, seed).unwrap();
                let src = s.source.as_ref().unwrap();
                let changed = changed_pixels(src, &s.image);
                // every changed pixel is masked; unmasked pixels are identical
                for ((y, x), &c) in changed.0.indexed_iter() {
                    if c == 1 {
                        assert!(s.mask.get(y, x));
                    }
                }
                assert_eq!(close3x3(&changed), s.mask);
                assert!(s.mask.count() >= 1 && s.mask.count() <= 64 * 64 / 2);
                assert!(s.image.0.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
