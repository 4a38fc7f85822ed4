//! Situation dataset: lexicon, annotated frames, file formats, synthetic
//! generation, and train-time augmentation.
//!
//! An image carries one verb and one frame: the verb's ordered role list,
//! each role filled by three annotator nouns and an optional box. Boxes are
//! stored in pixel coordinates together with the image extent, matching the
//! annotation file layout; normalization happens where losses and metrics
//! need it. Noun id 0 is reserved for the empty filler.
//!
//! Ids are assigned from sorted names (verbs, roles, nouns), so two loads of
//! the same files agree and generated datasets replay bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayImage;
use crate::rng::CounterRng;

// ── Ids ─────────────────────────────────────────────────────────────────

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn idx(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(VerbId);
id_type!(RoleId);
id_type!(NounId);

/// The empty filler: a role that is present but has no noun.
pub const EMPTY_NOUN: NounId = NounId(0);
pub const EMPTY_NOUN_NAME: &str = "∅";

// ── Boxes ───────────────────────────────────────────────────────────────

/// Axis-aligned box in pixel coordinates, corners ordered. Zero area is
/// legal (point annotations); negative extent is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        let b = BBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation { path: "bbox".into(), message: format!("non-finite corner in {b:?}") });
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Validation { path: "bbox".into(), message: format!("corners out of order in {b:?}") });
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Mirror around the vertical axis of an image `img_width` wide.
    pub fn flip_x(&self, img_width: f64) -> BBox {
        BBox { x1: img_width - self.x2, y1: self.y1, x2: img_width - self.x1, y2: self.y2 }
    }

    pub fn scaled(&self, num: usize, den: usize) -> BBox {
        let f = num as f64 / den as f64;
        BBox { x1: self.x1 * f, y1: self.y1 * f, x2: self.x2 * f, y2: self.y2 * f }
    }

    /// Corners normalized by the image extent, each in [0, 1].
    pub fn normalized(&self, img_w: f64, img_h: f64) -> [f64; 4] {
        [self.x1 / img_w, self.y1 / img_h, self.x2 / img_w, self.y2 / img_h]
    }

    /// Normalized (cx, cy, w, h): the box-head target parameterization.
    pub fn normalized_cxcywh(&self, img_w: f64, img_h: f64) -> [f64; 4] {
        let [x1, y1, x2, y2] = self.normalized(img_w, img_h);
        [(x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1]
    }
}

// ── Frames ──────────────────────────────────────────────────────────────

pub const ANNOTATORS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RoleAnnotation {
    pub role: RoleId,
    /// One noun per annotator; may be the empty filler.
    pub nouns: [NounId; ANNOTATORS],
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub verb: VerbId,
    /// Always in the verb's lexicon role order.
    pub roles: Vec<RoleAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub frame: Frame,
    /// Present when pixel data is available; statistics work without it.
    pub image: Option<GrayImage>,
}

// ── Lexicon ─────────────────────────────────────────────────────────────

/// Verb, role, and noun vocabularies plus each verb's ordered role list.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    verb_names: Vec<String>,
    verb_roles: Vec<Vec<RoleId>>,
    role_names: Vec<String>,
    /// Index 0 is the empty filler.
    noun_names: Vec<String>,
    verb_index: BTreeMap<String, VerbId>,
    role_index: BTreeMap<String, RoleId>,
    noun_index: BTreeMap<String, NounId>,
}

pub const MAX_ARITY: usize = 6;

impl Lexicon {
    /// Builds a lexicon from verb → role-name lists and a noun vocabulary.
    /// Ids come from sorted names; the empty filler takes noun id 0.
    pub fn from_parts(verbs: &BTreeMap<String, Vec<String>>, nouns: &[String]) -> Result<Lexicon> {
        if verbs.is_empty() {
            return Err(Error::Lexicon("no verbs".into()));
        }
        let mut role_set = BTreeSet::new();
        for (verb, roles) in verbs {
            if roles.is_empty() || roles.len() > MAX_ARITY {
                return Err(Error::Lexicon(format!(
                    "verb `{verb}` has {} roles; expected 1 to {MAX_ARITY}",
                    roles.len()
                )));
            }
            let unique: BTreeSet<&String> = roles.iter().collect();
            if unique.len() != roles.len() {
                return Err(Error::Lexicon(format!("verb `{verb}` repeats a role")));
            }
            role_set.extend(roles.iter().cloned());
        }
        let role_names: Vec<String> = role_set.into_iter().collect();
        let role_index: BTreeMap<String, RoleId> =
            role_names.iter().enumerate().map(|(i, n)| (n.clone(), RoleId(i as u32))).collect();

        let mut noun_names = vec![EMPTY_NOUN_NAME.to_string()];
        let mut sorted: Vec<String> = nouns.to_vec();
        sorted.sort();
        for n in sorted {
            if n.is_empty() || n == EMPTY_NOUN_NAME {
                return Err(Error::Lexicon(format!("reserved or empty noun name `{n}`")));
            }
            if noun_names.contains(&n) {
                return Err(Error::Lexicon(format!("duplicate noun `{n}`")));
            }
            noun_names.push(n);
        }
        let noun_index: BTreeMap<String, NounId> =
            noun_names.iter().enumerate().map(|(i, n)| (n.clone(), NounId(i as u32))).collect();

        let verb_names: Vec<String> = verbs.keys().cloned().collect();
        let verb_index: BTreeMap<String, VerbId> =
            verb_names.iter().enumerate().map(|(i, n)| (n.clone(), VerbId(i as u32))).collect();
        let verb_roles: Vec<Vec<RoleId>> =
            verb_names.iter().map(|v| verbs[v].iter().map(|r| role_index[r]).collect()).collect();

        Ok(Lexicon { verb_names, verb_roles, role_names, noun_names, verb_index, role_index, noun_index })
    }

    pub fn verb_count(&self) -> usize {
        self.verb_names.len()
    }

    pub fn role_count(&self) -> usize {
        self.role_names.len()
    }

    /// Noun classes including the empty filler at index 0.
    pub fn noun_count(&self) -> usize {
        self.noun_names.len()
    }

    pub fn roles_of(&self, verb: VerbId) -> &[RoleId] {
        &self.verb_roles[verb.idx()]
    }

    pub fn arity(&self, verb: VerbId) -> usize {
        self.verb_roles[verb.idx()].len()
    }

    pub fn verb_name(&self, v: VerbId) -> &str {
        &self.verb_names[v.idx()]
    }

    pub fn role_name(&self, r: RoleId) -> &str {
        &self.role_names[r.idx()]
    }

    pub fn noun_name(&self, n: NounId) -> &str {
        &self.noun_names[n.idx()]
    }

    pub fn verb_id(&self, name: &str) -> Result<VerbId> {
        self.verb_index.get(name).copied().ok_or_else(|| Error::Lexicon(format!("unknown verb `{name}`")))
    }

    pub fn role_id(&self, name: &str) -> Result<RoleId> {
        self.role_index.get(name).copied().ok_or_else(|| Error::Lexicon(format!("unknown role `{name}`")))
    }

    /// Empty string means the empty filler.
    pub fn noun_id(&self, name: &str) -> Result<NounId> {
        if name.is_empty() {
            return Ok(EMPTY_NOUN);
        }
        self.noun_index.get(name).copied().ok_or_else(|| Error::Lexicon(format!("unknown noun `{name}`")))
    }

    /// Mean role count over the verb vocabulary.
    pub fn mean_arity(&self) -> f64 {
        let total: usize = self.verb_roles.iter().map(|r| r.len()).sum();
        total as f64 / self.verb_count() as f64
    }
}

// ── Dataset ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dataset {
    pub lexicon: Lexicon,
    /// Sorted by image name; the position is the stable frame id.
    pub records: Vec<ImageRecord>,
}

/// Counts reported by `Dataset::stats` and checked by the generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub verbs: usize,
    pub role_types: usize,
    pub images: usize,
    pub mean_arity: f64,
    /// Fraction of role slots that carry a box.
    pub box_coverage: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verbs:        {}", self.verbs)?;
        writeln!(f, "role types:   {}", self.role_types)?;
        writeln!(f, "images:       {}", self.images)?;
        writeln!(f, "mean arity:   {:.4}", self.mean_arity)?;
        write!(f, "box coverage: {:.4}", self.box_coverage)
    }
}

impl Dataset {
    pub fn stats(&self) -> DatasetStats {
        let mut slots = 0usize;
        let mut boxed = 0usize;
        for rec in &self.records {
            for role in &rec.frame.roles {
                slots += 1;
                if role.bbox.is_some() {
                    boxed += 1;
                }
            }
        }
        DatasetStats {
            verbs: self.lexicon.verb_count(),
            role_types: self.lexicon.role_count(),
            images: self.records.len(),
            mean_arity: self.lexicon.mean_arity(),
            box_coverage: if slots == 0 { 0.0 } else { boxed as f64 / slots as f64 },
        }
    }

    /// Loads `lexicon.json`, `annotations.json`, and (when present) the
    /// `images/` directory from `dir`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let lex_raw = std::fs::read_to_string(dir.join("lexicon.json"))
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.join("lexicon.json").display())))?;
        let lex_file: LexiconFile =
            serde_json::from_str(&lex_raw).map_err(|e| Error::Input(format!("lexicon.json: {e}")))?;
        let lexicon = Lexicon::from_parts(&lex_file.verbs, &lex_file.nouns)?;

        let ann_raw = std::fs::read_to_string(dir.join("annotations.json"))
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.join("annotations.json").display())))?;
        let anns: BTreeMap<String, ImageAnn> =
            serde_json::from_str(&ann_raw).map_err(|e| Error::Input(format!("annotations.json: {e}")))?;

        let images_dir = dir.join("images");
        let mut records = Vec::with_capacity(anns.len());
        for (name, ann) in anns {
            let frame = ann.into_frame(&lexicon, &name)?;
            let image_path = images_dir.join(&name);
            let image = if image_path.is_file() { Some(GrayImage::read_pgm(&image_path)?) } else { None };
            if let Some(img) = &image {
                if img.width() != ann_extent(frame.1) || img.height() != ann_extent(frame.2) {
                    return Err(Error::Validation {
                        path: format!("annotations.{name}"),
                        message: format!(
                            "image is {}x{}, annotation says {}x{}",
                            img.width(),
                            img.height(),
                            frame.1,
                            frame.2
                        ),
                    });
                }
            }
            records.push(ImageRecord { name, width: frame.1, height: frame.2, frame: frame.0, image });
        }
        Ok(Dataset { lexicon, records })
    }

    /// Writes the dataset in the load format. Images go out as 16-bit PGM.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut verbs = BTreeMap::new();
        for v in 0..self.lexicon.verb_count() {
            let vid = VerbId(v as u32);
            verbs.insert(
                self.lexicon.verb_name(vid).to_string(),
                self.lexicon.roles_of(vid).iter().map(|&r| self.lexicon.role_name(r).to_string()).collect(),
            );
        }
        let nouns: Vec<String> = (1..self.lexicon.noun_count())
            .map(|n| self.lexicon.noun_name(NounId(n as u32)).to_string())
            .collect();
        let lex_file = LexiconFile { verbs, nouns };
        std::fs::write(dir.join("lexicon.json"), serde_json::to_string_pretty(&lex_file).expect("json"))?;

        let mut anns: BTreeMap<String, ImageAnn> = BTreeMap::new();
        for rec in &self.records {
            anns.insert(rec.name.clone(), ImageAnn::from_record(rec, &self.lexicon));
        }
        std::fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&anns).expect("json"))?;

        if self.records.iter().any(|r| r.image.is_some()) {
            let images_dir = dir.join("images");
            std::fs::create_dir_all(&images_dir)?;
            for rec in &self.records {
                if let Some(img) = &rec.image {
                    img.write_pgm(&images_dir.join(&rec.name))?;
                }
            }
        }
        Ok(())
    }
}

fn ann_extent(v: u32) -> usize {
    v as usize
}

// ── File schemas ────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct LexiconFile {
    verbs: BTreeMap<String, Vec<String>>,
    nouns: Vec<String>,
}

/// One image's annotation: verb, extent, per-role boxes in pixel
/// coordinates ([-1,-1,-1,-1] marks no box), and three annotator frames
/// mapping role → noun name ("" marks the empty filler).
#[derive(Debug, Serialize, Deserialize)]
struct ImageAnn {
    verb: String,
    width: u32,
    height: u32,
    bb: BTreeMap<String, [f64; 4]>,
    frames: [BTreeMap<String, String>; ANNOTATORS],
}

const NO_BOX: [f64; 4] = [-1.0, -1.0, -1.0, -1.0];

impl ImageAnn {
    fn into_frame(self, lexicon: &Lexicon, image: &str) -> Result<(Frame, u32, u32)> {
        let at = |what: &str| format!("annotations.{image}.{what}");
        let verb = lexicon
            .verb_id(&self.verb)
            .map_err(|_| Error::Validation { path: at("verb"), message: format!("unknown verb `{}`", self.verb) })?;
        let roles = lexicon.roles_of(verb);
        let role_names: BTreeSet<&str> = roles.iter().map(|&r| lexicon.role_name(r)).collect();

        for (k, fr) in self.frames.iter().enumerate() {
            let got: BTreeSet<&str> = fr.keys().map(|s| s.as_str()).collect();
            if got != role_names {
                return Err(Error::Validation {
                    path: at(&format!("frames[{k}]")),
                    message: format!("role set {:?} does not match verb `{}` {:?}", got, self.verb, role_names),
                });
            }
        }
        for role in self.bb.keys() {
            if !role_names.contains(role.as_str()) {
                return Err(Error::Validation {
                    path: at("bb"),
                    message: format!("box for role `{role}` which verb `{}` lacks", self.verb),
                });
            }
        }

        let mut annotations = Vec::with_capacity(roles.len());
        for &role in roles {
            let rname = lexicon.role_name(role);
            let mut nouns = [EMPTY_NOUN; ANNOTATORS];
            for (k, fr) in self.frames.iter().enumerate() {
                let name = &fr[rname];
                nouns[k] = lexicon.noun_id(name).map_err(|_| Error::Validation {
                    path: at(&format!("frames[{k}].{rname}")),
                    message: format!("unknown noun `{name}`"),
                })?;
            }
            let bbox = match self.bb.get(rname) {
                None => None,
                Some(&c) if c == NO_BOX => None,
                Some(&[x1, y1, x2, y2]) => {
                    let b = BBox::new(x1, y1, x2, y2)
                        .map_err(|e| Error::Validation { path: at(&format!("bb.{rname}")), message: e.to_string() })?;
                    if x1 < 0.0 || y1 < 0.0 || x2 > self.width as f64 || y2 > self.height as f64 {
                        return Err(Error::Validation {
                            path: at(&format!("bb.{rname}")),
                            message: format!("box {b:?} leaves the {}x{} image", self.width, self.height),
                        });
                    }
                    Some(b)
                }
            };
            annotations.push(RoleAnnotation { role, nouns, bbox });
        }
        Ok((Frame { verb, roles: annotations }, self.width, self.height))
    }

    fn from_record(rec: &ImageRecord, lexicon: &Lexicon) -> ImageAnn {
        let mut bb = BTreeMap::new();
        let mut frames: [BTreeMap<String, String>; ANNOTATORS] = Default::default();
        for role in &rec.frame.roles {
            let rname = lexicon.role_name(role.role).to_string();
            let coords = role.bbox.map_or(NO_BOX, |b| [b.x1, b.y1, b.x2, b.y2]);
            bb.insert(rname.clone(), coords);
            for (k, frame) in frames.iter_mut().enumerate() {
                let noun = role.nouns[k];
                let name = if noun == EMPTY_NOUN { String::new() } else { lexicon.noun_name(noun).to_string() };
                frame.insert(rname.clone(), name);
            }
        }
        ImageAnn {
            verb: lexicon.verb_name(rec.frame.verb).to_string(),
            width: rec.width,
            height: rec.height,
            bb,
            frames,
        }
    }
}

// ── Augmentation ────────────────────────────────────────────────────────

/// Horizontal flip: mirrors the pixels and remaps every box. Noun labels
/// and role order are untouched; pairwise overlap between boxes of the same
/// image is preserved.
pub fn flip_record(rec: &ImageRecord) -> ImageRecord {
    let w = rec.width as f64;
    let mut frame = rec.frame.clone();
    for role in &mut frame.roles {
        role.bbox = role.bbox.map(|b| b.flip_x(w));
    }
    ImageRecord {
        name: rec.name.clone(),
        width: rec.width,
        height: rec.height,
        frame,
        image: rec.image.as_ref().map(|img| img.flip_horizontal()),
    }
}

/// Aspect-preserving rescale by num/den. Normalized box coordinates are
/// unchanged; pixel coordinates and the stored extent scale together.
pub fn scale_record(rec: &ImageRecord, num: usize, den: usize) -> ImageRecord {
    let mut frame = rec.frame.clone();
    for role in &mut frame.roles {
        role.bbox = role.bbox.map(|b| b.scaled(num, den));
    }
    ImageRecord {
        name: rec.name.clone(),
        width: (rec.width as usize * num / den) as u32,
        height: (rec.height as usize * num / den) as u32,
        frame,
        image: rec.image.as_ref().map(|img| img.scale(num, den)),
    }
}

// ── Synthetic generation ────────────────────────────────────────────────

/// Procedural dataset: the verb is drawn as a horizontal band in the top
/// quarter of the image (flip-invariant), and each role type owns a fixed
/// grid cell where its filler appears as a square whose intensity encodes
/// the noun. The last role of verbs with three or more roles is boxless;
/// its noun is a fixed function of the verb, so everything stays decodable
/// from pixels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub verbs: usize,
    /// Role count per verb, each within 1..=6.
    pub arities: Vec<usize>,
    pub images_per_verb: usize,
    /// Distinct nouns drawable in one slot.
    pub nouns_per_slot: usize,
    /// Square image extent, multiple of 8.
    pub image_size: usize,
    /// Additive Gaussian pixel noise.
    pub noise: f64,
    /// Box placement jitter in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            verbs: 8,
            arities: vec![1, 2, 3, 4, 1, 2, 3, 4],
            images_per_verb: 16,
            nouns_per_slot: 4,
            image_size: 32,
            noise: 0.0,
            jitter: 1,
            seed: 7,
        }
    }
}

const ROLE_POOL: [&str; MAX_ARITY] = ["agent", "item", "tool", "source", "target", "place"];
const NOUN_VOCAB: usize = 10;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::Validation { path: "synth".into(), message });
        if self.verbs == 0 || self.images_per_verb == 0 {
            return fail("needs at least one verb and one image per verb".into());
        }
        if self.arities.len() != self.verbs {
            return fail(format!("{} arities for {} verbs", self.arities.len(), self.verbs));
        }
        if self.arities.iter().any(|&a| a == 0 || a > MAX_ARITY) {
            return fail(format!("arities must lie in 1..={MAX_ARITY}"));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return fail(format!("image size {} must be a multiple of 8, at least 16", self.image_size));
        }
        if self.verbs > self.banner_rows() {
            return fail(format!(
                "at most {} verbs fit the banner of a {}-pixel image",
                self.banner_rows(),
                self.image_size
            ));
        }
        if self.nouns_per_slot == 0 || self.nouns_per_slot > NOUN_VOCAB {
            return fail(format!("nouns per slot must lie in 1..={NOUN_VOCAB}"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail("noise must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn banner_rows(&self) -> usize {
        self.image_size / 4
    }

    fn box_side(&self) -> usize {
        self.image_size * 3 / 16
    }

    /// Role types of one verb: a rotation of the pool.
    fn verb_role_slots(&self, v: usize) -> Vec<usize> {
        (0..self.arities[v]).map(|i| (v + i) % MAX_ARITY).collect()
    }

    fn slot_is_boxless(&self, v: usize, slot: usize) -> bool {
        self.arities[v] >= 3 && slot == self.arities[v] - 1
    }

    /// Nouns drawable at (verb, pool slot): a contiguous window of the
    /// global vocabulary.
    fn allowed_nouns(&self, v: usize, pool_slot: usize) -> std::ops::Range<usize> {
        let start = (v * 3 + pool_slot * 2) % (NOUN_VOCAB - self.nouns_per_slot + 1);
        start..start + self.nouns_per_slot
    }

    /// The statistics `generate` must reproduce exactly.
    pub fn expected_stats(&self) -> DatasetStats {
        let mut types = BTreeSet::new();
        let mut total_slots = 0usize;
        let mut boxed_slots = 0usize;
        let mut arity_sum = 0usize;
        for v in 0..self.verbs {
            types.extend(self.verb_role_slots(v));
            arity_sum += self.arities[v];
            total_slots += self.images_per_verb * self.arities[v];
            let boxless = if self.arities[v] >= 3 { 1 } else { 0 };
            boxed_slots += self.images_per_verb * (self.arities[v] - boxless);
        }
        DatasetStats {
            verbs: self.verbs,
            role_types: types.len(),
            images: self.verbs * self.images_per_verb,
            mean_arity: arity_sum as f64 / self.verbs as f64,
            box_coverage: boxed_slots as f64 / total_slots as f64,
        }
    }
}

fn noun_intensity(g: usize) -> f64 {
    0.25 + 0.7 * g as f64 / (NOUN_VOCAB - 1) as f64
}

/// Generates the procedural dataset described on [`SynthSpec`].
/// Deterministic: the same spec always yields bit-identical pixels,
/// labels, and boxes.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let banner_rows = spec.banner_rows();
    let band_h = banner_rows / spec.verbs;
    let cells_y0 = banner_rows + 2;
    let cell_w = s / 3;
    let cell_h = (s - cells_y0) / 2;
    let side = spec.box_side();

    let mut verbs = BTreeMap::new();
    for v in 0..spec.verbs {
        let roles: Vec<String> =
            spec.verb_role_slots(v).iter().map(|&t| ROLE_POOL[t].to_string()).collect();
        verbs.insert(format!("verb{v:02}"), roles);
    }
    let nouns: Vec<String> = (0..NOUN_VOCAB).map(|g| format!("thing{g}")).collect();
    let lexicon = Lexicon::from_parts(&verbs, &nouns)?;

    let mut records = Vec::with_capacity(spec.verbs * spec.images_per_verb);
    for v in 0..spec.verbs {
        let verb = lexicon.verb_id(&format!("verb{v:02}"))?;
        let pool_slots = spec.verb_role_slots(v);
        for k in 0..spec.images_per_verb {
            let name = format!("img_v{v:02}_{k:03}.pgm");
            let mut img = GrayImage::new(s, s);
            img.fill_rect(0, v * band_h, s, (v + 1) * band_h, 1.0);

            let mut roles = Vec::with_capacity(pool_slots.len());
            for (slot, &t) in pool_slots.iter().enumerate() {
                let role = lexicon.role_id(ROLE_POOL[t])?;
                let allowed = spec.allowed_nouns(v, t);
                let (noun_g, bbox) = if spec.slot_is_boxless(v, slot) {
                    (allowed.start, None)
                } else {
                    let mut rng = CounterRng::keyed(&[spec.seed, v as u64, k as u64, slot as u64]);
                    let g = allowed.start + rng.below(allowed.len());
                    let jx = rng.below(2 * spec.jitter + 1) as i64 - spec.jitter as i64;
                    let jy = rng.below(2 * spec.jitter + 1) as i64 - spec.jitter as i64;
                    let cx = ((t % 3) * cell_w + cell_w / 2) as i64 + jx;
                    let cy = (cells_y0 + (t / 3) * cell_h + cell_h / 2) as i64 + jy;
                    let x1 = (cx - side as i64 / 2).clamp(0, (s - side) as i64) as usize;
                    let y1 = (cy - side as i64 / 2).clamp(cells_y0 as i64, (s - side) as i64) as usize;
                    img.fill_rect(x1, y1, x1 + side, y1 + side, noun_intensity(g));
                    let b = BBox::new(x1 as f64, y1 as f64, (x1 + side) as f64, (y1 + side) as f64)?;
                    (g, Some(b))
                };
                let noun = lexicon.noun_id(&format!("thing{noun_g}"))?;
                roles.push(RoleAnnotation { role, nouns: [noun; ANNOTATORS], bbox });
            }

            if spec.noise > 0.0 {
                let mut rng = CounterRng::keyed(&[spec.seed, 0x6e6f697365, v as u64, k as u64]);
                for y in 0..s {
                    for x in 0..s {
                        img.splat(x, y, spec.noise * rng.normal());
                    }
                }
            }
            img.quantize16();

            records.push(ImageRecord {
                name,
                width: s as u32,
                height: s as u32,
                frame: Frame { verb, roles },
                image: Some(img),
            });
        }
    }
    records.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Dataset { lexicon, records })
}
