//! Synthetic shapes corpus: captioned renders, edit triples, VQA and text-only facts.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Family, RawSourceRecord, Role};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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

    fn sides(self) -> &'static str {
        match self {
            Shape::Circle => "zero",
            Shape::Square => "four",
            Shape::Triangle => "three",
        }
    }
}

pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.20]),
    ("blue", [0.15, 0.30, 0.95]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("purple", [0.60, 0.20, 0.80]),
    ("orange", [1.00, 0.55, 0.00]),
];

pub const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.08];
pub const ROWS: [&str; 3] = ["top", "middle", "bottom"];
pub const COLS: [&str; 3] = ["left", "center", "right"];

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// One shape on a plain background.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub color: String,
    pub row: usize,
    pub col: usize,
    pub dx: f32,
    pub dy: f32,
    pub radius: f32,
}

impl Scene {
    pub fn position(&self) -> String {
        format!("{} {}", ROWS[self.row], COLS[self.col])
    }

    pub fn caption(&self) -> String {
        format!("a {} {} at {}", self.color, self.shape.name(), self.position())
    }

    fn contains(&self, px: f32, py: f32, canvas: usize) -> bool {
        let cell = canvas as f32 / 3.0;
        let cx = (self.col as f32 + 0.5) * cell + self.dx;
        let cy = (self.row as f32 + 0.5) * cell + self.dy;
        let (x, y, r) = (px - cx, py - cy, self.radius);
        match self.shape {
            Shape::Circle => x * x + y * y <= r * r,
            Shape::Square => x.abs() <= 0.85 * r && y.abs() <= 0.85 * r,
            Shape::Triangle => y >= -r && y <= 0.8 * r && x.abs() <= 0.62 * (y + r),
        }
    }

    /// Pixel-centre sampling; quantized so the render equals its PPM file.
    pub fn render(&self, canvas: usize) -> ImageTensor {
        let rgb = color_rgb(&self.color).unwrap_or([1.0, 1.0, 1.0]);
        let mut img = ImageTensor::filled(canvas, canvas, BACKGROUND);
        for y in 0..canvas {
            for x in 0..canvas {
                if self.contains(x as f32 + 0.5, y as f32 + 0.5, canvas) {
                    img.set(y, x, rgb);
                }
            }
        }
        img.quantized()
    }

    pub fn random(shapes: &[Shape], colors: &[String], rng: &mut rng::Rng) -> Scene {
        Scene {
            shape: *shapes.choose(rng).expect("no shapes"),
            color: colors.choose(rng).expect("no colors").clone(),
            row: rng.random_range(0..3),
            col: rng.random_range(0..3),
            dx: rng.random_range(-1.0..1.0),
            dy: rng.random_range(-1.0..1.0),
            radius: rng.random_range(3.8..4.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub shapes: Vec<Shape>,
    pub colors: Vec<String>,
    pub canvas: usize,
    pub n_generation: usize,
    pub n_understanding: usize,
    pub n_editing: usize,
    pub n_natural_language: usize,
    pub templates: Vec<String>,
}

pub const GENERATION_TEMPLATES: [&str; 4] = [
    "Please generate an image of {caption}",
    "generate an image of {caption}",
    "draw {caption}",
    "create a picture of {caption}",
];

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            shapes: Shape::ALL.to_vec(),
            colors: PALETTE.iter().map(|(n, _)| n.to_string()).collect(),
            canvas: 32,
            n_generation: 2000,
            n_understanding: 2000,
            n_editing: 1000,
            n_natural_language: 200,
            templates: GENERATION_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CorpusSpec {
    /// Number of distinct captions.
    pub fn caption_space(&self) -> usize {
        self.shapes.len() * self.colors.len() * ROWS.len() * COLS.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("corpus needs at least one shape and one color".into()));
        }
        if let Some(c) = self.colors.iter().find(|c| color_rgb(c).is_none()) {
            return Err(Error::Config(format!("unknown color `{c}`")));
        }
        if self.n_editing > 0 && self.colors.len() < 2 {
            return Err(Error::Config("editing needs at least two colors".into()));
        }
        if self.canvas < 12 {
            return Err(Error::Config("canvas must be at least 12 pixels".into()));
        }
        Ok(())
    }
}

/// Images keyed by reference id, with the caption of the rendered scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageStore {
    pub images: BTreeMap<String, ImageTensor>,
    pub captions: BTreeMap<String, String>,
}

impl ImageStore {
    pub fn add(&mut self, img: ImageTensor, caption: String) -> String {
        let id = format!("img_{:06}", self.images.len());
        self.images.insert(id.clone(), img);
        self.captions.insert(id.clone(), caption);
        id
    }

    pub fn get(&self, id: &str) -> Result<&ImageTensor> {
        self.images.get(id).ok_or_else(|| Error::Input(format!("unknown image reference `{id}`")))
    }

    /// Every (caption, image id) pair, in id order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.captions.iter().map(|(id, c)| (c.clone(), id.clone())).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<RawSourceRecord>,
    pub images: ImageStore,
}

fn turns(user: String, assistant: String) -> Vec<(Role, String)> {
    vec![(Role::User, user), (Role::Assistant, assistant)]
}

fn understanding_turns(scene: &Scene, rng: &mut rng::Rng) -> Vec<(Role, String)> {
    let shape = scene.shape.name();
    match rng.random_range(0..4) {
        0 => turns(format!("what color is the {shape}?"), scene.color.clone()),
        1 => turns("what shape is in the image?".into(), shape.into()),
        2 => turns(format!("where is the {shape}?"), scene.position()),
        _ => turns("describe the image.".into(), scene.caption()),
    }
}

fn natural_language_turns(spec: &CorpusSpec, rng: &mut rng::Rng) -> Vec<(Role, String)> {
    const MIXES: [(&str, &str, &str); 3] =
        [("red", "yellow", "orange"), ("blue", "yellow", "green"), ("red", "blue", "purple")];
    match rng.random_range(0..3) {
        0 => {
            let s = spec.shapes.choose(rng).unwrap();
            turns(format!("how many sides does a {} have?", s.name()), s.sides().into())
        }
        1 => {
            let (a, b, c) = MIXES.choose(rng).unwrap();
            turns(format!("what color do you get by mixing {a} and {b}?"), c.to_string())
        }
        _ => {
            if rng.random_bool(0.5) {
                turns(format!("is {} a color?", spec.colors.choose(rng).unwrap()), "yes".into())
            } else {
                turns(format!("is {} a color?", spec.shapes.choose(rng).unwrap().name()), "no".into())
            }
        }
    }
}

/// Turns captioned images into generation requests with a seeded template choice.
pub fn invert_captions(pairs: &[(String, String)], templates: &[String], seed: u64) -> Result<Vec<RawSourceRecord>> {
    if templates.is_empty() {
        return Err(Error::Config("no generation templates".into()));
    }
    if let Some(t) = templates.iter().find(|t| t.matches("{caption}").count() != 1) {
        return Err(Error::Config(format!("template `{t}` must contain exactly one {{caption}} slot")));
    }
    let mut r = rng::stream(seed, "invert_captions", 0);
    Ok(pairs
        .iter()
        .map(|(caption, image)| {
            let t = &templates[r.random_range(0..templates.len())];
            RawSourceRecord {
                family: Family::Generation,
                text_turns: turns(t.replace("{caption}", caption), String::new()),
                input_image_ref: None,
                target_image_ref: Some(image.clone()),
            }
        })
        .collect())
}

pub fn generate_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut store = ImageStore::default();
    let mut records = Vec::new();

    let mut r = rng::stream(seed, "corpus/generation", 0);
    let mut pairs = Vec::with_capacity(spec.n_generation);
    for _ in 0..spec.n_generation {
        let scene = Scene::random(&spec.shapes, &spec.colors, &mut r);
        let caption = scene.caption();
        let id = store.add(scene.render(spec.canvas), caption.clone());
        pairs.push((caption, id));
    }
    records.extend(invert_captions(&pairs, &spec.templates, seed)?);

    let mut r = rng::stream(seed, "corpus/understanding", 0);
    for _ in 0..spec.n_understanding {
        let scene = Scene::random(&spec.shapes, &spec.colors, &mut r);
        let id = store.add(scene.render(spec.canvas), scene.caption());
        records.push(RawSourceRecord {
            family: Family::Understanding,
            text_turns: understanding_turns(&scene, &mut r),
            input_image_ref: Some(id),
            target_image_ref: None,
        });
    }

    let mut r = rng::stream(seed, "corpus/editing", 0);
    for _ in 0..spec.n_editing {
        let source = Scene::random(&spec.shapes, &spec.colors, &mut r);
        let others: Vec<&String> = spec.colors.iter().filter(|c| **c != source.color).collect();
        let new_color = (*others.choose(&mut r).unwrap()).clone();
        let target = Scene { color: new_color.clone(), ..source.clone() };
        let src_id = store.add(source.render(spec.canvas), source.caption());
        let tgt_id = store.add(target.render(spec.canvas), target.caption());
        records.push(RawSourceRecord {
            family: Family::Editing,
            text_turns: turns(format!("make the {} {new_color}", source.shape.name()), String::new()),
            input_image_ref: Some(src_id),
            target_image_ref: Some(tgt_id),
        });
    }

    let mut r = rng::stream(seed, "corpus/natural_language", 0);
    for _ in 0..spec.n_natural_language {
        records.push(RawSourceRecord {
            family: Family::NaturalLanguage,
            text_turns: natural_language_turns(spec, &mut r),
            input_image_ref: None,
            target_image_ref: None,
        });
    }

    Ok(Corpus { records, images: store })
}

/// Source render, instruction, ground-truth edit and an unrelated render.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTriple {
    pub source: ImageTensor,
    pub instruction: String,
    pub target: ImageTensor,
    pub target_caption: String,
    pub unrelated: ImageTensor,
}

/// `n` renders with pairwise-distinct captions drawn from their own stream.
pub fn held_out_captions(spec: &CorpusSpec, seed: u64, n: usize) -> Result<Vec<(String, ImageTensor)>> {
    spec.validate()?;
    let space = spec.caption_space();
    if n > space {
        return Err(Error::Config(format!("only {space} distinct captions exist, {n} requested")));
    }
    let mut r = rng::stream(seed, "heldout/generation", 0);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let scene = Scene::random(&spec.shapes, &spec.colors, &mut r);
        if seen.insert(scene.caption()) {
            out.push((scene.caption(), scene.render(spec.canvas)));
        }
    }
    Ok(out)
}

/// `n` random renders from their own stream, for the real side of FID.
pub fn held_out_renders(spec: &CorpusSpec, seed: u64, n: usize) -> Result<Vec<ImageTensor>> {
    spec.validate()?;
    let mut r = rng::stream(seed, "heldout/real", 0);
    Ok((0..n).map(|_| Scene::random(&spec.shapes, &spec.colors, &mut r).render(spec.canvas)).collect())
}

/// `n` (render, question, answer) items from their own stream.
pub fn held_out_vqa(spec: &CorpusSpec, seed: u64, n: usize) -> Result<Vec<(ImageTensor, String, String)>> {
    spec.validate()?;
    let mut r = rng::stream(seed, "heldout/understanding", 0);
    Ok((0..n)
        .map(|_| {
            let scene = Scene::random(&spec.shapes, &spec.colors, &mut r);
            let t = understanding_turns(&scene, &mut r);
            (scene.render(spec.canvas), t[0].1.clone(), t[1].1.clone())
        })
        .collect())
}

/// `n` recolor edits; the unrelated render differs in shape, color and cell from the target.
pub fn held_out_edits(spec: &CorpusSpec, seed: u64, n: usize) -> Result<Vec<EditTriple>> {
    spec.validate()?;
    if spec.colors.len() < 3 || spec.shapes.len() < 2 {
        return Err(Error::Config("held-out edits need at least 3 colors and 2 shapes".into()));
    }
    let mut r = rng::stream(seed, "heldout/editing", 0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let source = Scene::random(&spec.shapes, &spec.colors, &mut r);
        let others: Vec<&String> = spec.colors.iter().filter(|c| **c != source.color).collect();
        let new_color = (*others.choose(&mut r).unwrap()).clone();
        let target = Scene { color: new_color.clone(), ..source.clone() };
        let unrelated = loop {
            let u = Scene::random(&spec.shapes, &spec.colors, &mut r);
            if u.shape != target.shape && u.color != target.color && (u.row, u.col) != (target.row, target.col) {
                break u;
            }
        };
        out.push(EditTriple {
            source: source.render(spec.canvas),
            instruction: format!("make the {} {new_color}", source.shape.name()),
            target: target.render(spec.canvas),
            target_caption: target.caption(),
            unrelated: unrelated.render(spec.canvas),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captions_are_short() {
        let mut r = rng::stream(0, "t", 0);
        let colors: Vec<String> = PALETTE.iter().map(|(n, _)| n.to_string()).collect();
        for _ in 0..50 {
            let s = Scene::random(&Shape::ALL, &colors, &mut r);
            assert!(s.caption().split_whitespace().count() <= 7);
        }
    }

    #[test]
    fn every_cell_renders_inside_canvas() {
        for row in 0..3 {
            for col in 0..3 {
                for shape in Shape::ALL {
                    let s = Scene { shape, color: "red".into(), row, col, dx: 1.0, dy: 1.0, radius: 4.6 };
                    let img = s.render(32);
                    let lit = img.pixels.chunks(3).filter(|p| p[0] > 0.5).count();
                    assert!(lit > 20, "{shape:?} at ({row},{col}) lit {lit}");
                }
            }
        }
    }
}
