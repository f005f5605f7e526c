//! Synthetic referring-expression scenes and the `SBDS` container.
//!
//! Geometry is integer-only so a `(seed, index)` pair yields the same sample
//! on every platform.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbanet_autograd::codec::ByteReader;
use sbanet_autograd::Tensor;

use crate::error::{CoreError, Result};

pub const VOCAB: [&str; 24] = [
    "<pad>", "the", "a", "red", "green", "blue", "yellow", "white", "circle", "square", "triangle", "on", "in", "at",
    "left", "right", "top", "bottom", "middle", "of", "image", "side", "shape", "object",
];
pub const PAD_ID: u16 = 0;
pub const DATASET_MAGIC: &[u8; 4] = b"SBDS";
pub const DATASET_VERSION: u32 = 1;
pub const BACKGROUND: [u8; 3] = [30, 30, 30];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 220, 40],
            Color::White => [240, 240, 240],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Circle, Kind::Square, Kind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Kind::Circle => "circle",
            Kind::Square => "square",
            Kind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    Top,
    Bottom,
    Middle,
}

impl Relation {
    pub fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Top => "top",
            Relation::Bottom => "bottom",
            Relation::Middle => "middle",
        }
    }
}

/// An axis-aligned `side×side` box at `(x, y)` holding one shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub kind: Kind,
    pub color: Color,
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl Object {
    /// Pixel-center inclusion test (coordinates doubled to stay integral).
    pub fn contains(&self, px: usize, py: usize) -> bool {
        let k = self.side as i64;
        let (x0, y0) = (self.x as i64, self.y as i64);
        let (px, py) = (px as i64, py as i64);
        if px < x0 || py < y0 || px >= x0 + k || py >= y0 + k {
            return false;
        }
        let (cx, cy) = (2 * px + 1, 2 * py + 1);
        match self.kind {
            Kind::Square => true,
            Kind::Circle => {
                let (ox, oy) = (2 * x0 + k, 2 * y0 + k);
                (cx - ox).pow(2) + (cy - oy).pow(2) <= k * k
            }
            Kind::Triangle => {
                // Apex at the top middle, base along the bottom edge.
                let depth = cy - 2 * y0;
                2 * (cx - (2 * x0 + k)).abs() <= depth
            }
        }
    }

    /// Relations that hold for the box center, by absolute thirds of the
    /// image. `middle` means the central cell.
    pub fn relations(&self, size: usize) -> Vec<Relation> {
        let third = |c2: usize| {
            let c3 = 3 * c2;
            if c3 < 2 * size {
                0
            } else if c3 >= 4 * size {
                2
            } else {
                1
            }
        };
        let (hx, vy) = (third(2 * self.x + self.side), third(2 * self.y + self.side));
        let mut out = Vec::new();
        match hx {
            0 => out.push(Relation::Left),
            2 => out.push(Relation::Right),
            _ => {}
        }
        match vy {
            0 => out.push(Relation::Top),
            2 => out.push(Relation::Bottom),
            _ => {}
        }
        if hx == 1 && vy == 1 {
            out.push(Relation::Middle);
        }
        out
    }

    fn overlaps(&self, o: &Object) -> bool {
        // One free pixel between boxes.
        self.x < o.x + o.side + 1 && o.x < self.x + self.side + 1 && self.y < o.y + o.side + 1 && o.y < self.y + self.side + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub max_len: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { size: 64, min_shapes: 2, max_shapes: 4, min_side: 18, max_side: 26, max_len: 16 }
    }
}

impl SceneSpec {
    pub fn with_size(size: usize) -> Self {
        let base = Self::default();
        Self { size, min_side: base.min_side * size / 64, max_side: base.max_side * size / 64, ..base }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.size > 0
            && self.size <= u16::MAX as usize
            && self.min_shapes >= 1
            && self.min_shapes <= self.max_shapes
            && self.min_side >= 1
            && self.min_side <= self.max_side
            && self.max_side <= self.size
            && self.max_len >= 6
            && self.max_len <= u16::MAX as usize;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid scene spec {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: u32,
    pub height: usize,
    pub width: usize,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    /// Token ids padded to the maximum length.
    pub tokens: Vec<u16>,
    pub valid: usize,
    /// Row-major 0/1 mask.
    pub mask: Vec<u8>,
    pub expression: String,
}

impl Sample {
    /// `[H × W × 3]` in `[0, 1]`.
    pub fn image(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.pixels.iter().map(|&p| p as f64 / 255.0).collect())
            .expect("pixel buffer matches dimensions")
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }

    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Object and relation behind a generated expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub referent: usize,
    pub relation: Relation,
}

impl Scene {
    /// Objects matching the referent's color, kind and relation.
    pub fn matches(&self, size: usize) -> usize {
        let r = &self.objects[self.referent];
        self.objects
            .iter()
            .filter(|o| o.color == r.color && o.kind == r.kind && o.relations(size).contains(&self.relation))
            .count()
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn place(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Option<Vec<Object>> {
    let n = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = Kind::ALL[rng.gen_range(0..Kind::ALL.len())];
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        let side = rng.gen_range(spec.min_side..=spec.max_side);
        let mut placed = false;
        for _ in 0..100 {
            let x = rng.gen_range(0..=spec.size - side);
            let y = rng.gen_range(0..=spec.size - side);
            let o = Object { kind, color, x, y, side };
            if objects.iter().all(|p| !p.overlaps(&o)) {
                objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Draws a scene whose referent is singled out by its expression.
pub fn generate_scene(seed: u64, index: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = sample_rng(seed, index);
    for _ in 0..100 {
        let Some(objects) = place(&mut rng, spec) else { continue };
        let referent = rng.gen_range(0..objects.len());
        let rels = objects[referent].relations(spec.size);
        let relation = rels[rng.gen_range(0..rels.len())];
        let scene = Scene { objects, referent, relation };
        if scene.matches(spec.size) == 1 {
            return Ok(scene);
        }
    }
    Err(CoreError::Generation(format!("no unambiguous scene for sample {index} within 100 attempts (spec too crowded)")))
}

pub fn expression(scene: &Scene) -> String {
    let r = &scene.objects[scene.referent];
    format!("the {} {} on the {}", r.color.word(), r.kind.word(), scene.relation.word())
}

pub fn render(scene: &Scene, size: usize) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(size * size * 3);
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let hit = scene.objects.iter().position(|o| o.contains(x, y));
            let rgb = hit.map_or(BACKGROUND, |i| scene.objects[i].color.rgb());
            pixels.extend_from_slice(&rgb);
            if hit == Some(scene.referent) {
                mask[y * size + x] = 1;
            }
        }
    }
    (pixels, mask)
}

pub fn generate_sample(seed: u64, index: u32, spec: &SceneSpec) -> Result<Sample> {
    let scene = generate_scene(seed, index as u64, spec)?;
    let (pixels, mask) = render(&scene, spec.size);
    let expr = expression(&scene);
    let (tokens, valid) = tokenize(&expr, spec.max_len)?;
    Ok(Sample { id: index, height: spec.size, width: spec.size, pixels, tokens, valid, mask, expression: expr })
}

pub fn generate_dataset(seed: u64, n: usize, spec: &SceneSpec) -> Result<Vec<Sample>> {
    (0..n as u32).map(|i| generate_sample(seed, i, spec)).collect()
}

/// Lowercased whitespace tokens mapped to ids and padded to `max_len`.
pub fn tokenize(expr: &str, max_len: usize) -> Result<(Vec<u16>, usize)> {
    let mut ids = Vec::with_capacity(max_len);
    for word in expr.split_whitespace() {
        let w = word.to_lowercase();
        let id = VOCAB
            .iter()
            .position(|v| *v == w && w != VOCAB[0])
            .ok_or_else(|| CoreError::Data(format!("word {word:?} is not in the vocabulary")))?;
        ids.push(id as u16);
    }
    if ids.is_empty() {
        return Err(CoreError::Data("empty expression".into()));
    }
    if ids.len() > max_len {
        return Err(CoreError::Data(format!("expression has {} tokens, maximum is {max_len}", ids.len())));
    }
    let valid = ids.len();
    ids.resize(max_len, PAD_ID);
    Ok((ids, valid))
}

pub fn detokenize(ids: &[u16]) -> Result<String> {
    let words = ids
        .iter()
        .map(|&id| VOCAB.get(id as usize).copied().ok_or_else(|| CoreError::Data(format!("token id {id} outside vocabulary"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// Header fields of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub max_len: usize,
}

impl DatasetHeader {
    pub const BYTES: usize = 4 + 4 + 4 + 2 + 2 + 2;

    pub fn record_bytes(&self) -> usize {
        let hw = self.height * self.width;
        4 + hw * 3 + 2 * self.max_len + 2 + hw.div_ceil(8)
    }

    pub fn file_bytes(&self) -> usize {
        Self::BYTES + self.count * self.record_bytes()
    }
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let (h, w, l) = match samples.first() {
        Some(s) => (s.height, s.width, s.tokens.len()),
        None => (0, 0, 0),
    };
    let header = DatasetHeader { count: samples.len(), height: h, width: w, max_len: l };
    if h > u16::MAX as usize || w > u16::MAX as usize || l > u16::MAX as usize {
        return Err(CoreError::Data(format!("dimensions {h}×{w}, length {l} exceed the container limits")));
    }
    let mut out = Vec::with_capacity(header.file_bytes());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(l as u16).to_le_bytes());
    for s in samples {
        if s.height != h || s.width != w || s.tokens.len() != l {
            return Err(CoreError::Data(format!("sample {} does not share the dataset geometry", s.id)));
        }
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&s.pixels);
        for t in &s.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&(s.valid as u16).to_le_bytes());
        let mut bits = vec![0u8; (h * w).div_ceil(8)];
        for (p, &m) in s.mask.iter().enumerate() {
            if m > 1 {
                return Err(CoreError::Data(format!("sample {} mask value {m} is not binary", s.id)));
            }
            bits[p / 8] |= m << (p % 8);
        }
        out.extend_from_slice(&bits);
    }
    debug_assert_eq!(out.len(), header.file_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let at = r.position();
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(sbanet_autograd::TensorError::Format { offset: at, msg: format!("unsupported version {version}") }.into());
    }
    let count = r.u32()? as usize;
    let (h, w, l) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
    let hw = h * w;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.u32()?;
        let pixels = r.bytes(hw * 3)?.to_vec();
        let tokens = (0..l).map(|_| r.u16()).collect::<std::result::Result<Vec<_>, _>>()?;
        let at = r.position();
        let valid = r.u16()? as usize;
        if valid == 0 || valid > l {
            return Err(r_err(at, format!("valid count {valid} outside 1..={l}")));
        }
        let bits = r.bytes(hw.div_ceil(8))?;
        let mask = (0..hw).map(|p| (bits[p / 8] >> (p % 8)) & 1).collect();
        let expression = detokenize(&tokens[..valid]).map_err(|e| r_err(at, e.to_string()))?;
        samples.push(Sample { id, height: h, width: w, pixels, tokens, valid, mask, expression });
    }
    if !r.is_empty() {
        return Err(r.error(format!("{} trailing bytes", r.remaining())).into());
    }
    Ok(samples)
}

fn r_err(offset: u64, msg: String) -> CoreError {
    sbanet_autograd::TensorError::Format { offset, msg }.into()
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_dataset(&bytes)
}
