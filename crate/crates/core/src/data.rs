//! Synthetic compositional scenes: colored glyphs on a cell grid, paired with
//! captions that name (color, glyph, cell) for a subset of the placements.
//!
//! A caption that mentions a placement pins down every pixel of that cell,
//! which is what lets text reduce the uncertainty of predicting masked cells.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_error, Error, Result};
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{CaptionBatch, WordSequence};

/// 4×4 glyph bitmaps, one row per nibble (MSB = leftmost pixel).
const GLYPHS: [[u8; 4]; 8] = [
    [0b1111, 0b1001, 0b1001, 0b1111], // ring
    [0b0110, 0b1111, 0b1111, 0b0110], // disc
    [0b1000, 0b0100, 0b0010, 0b0001], // diagonal
    [0b0001, 0b0010, 0b0100, 0b1000], // anti-diagonal
    [0b0100, 0b1110, 0b0100, 0b0100], // cross
    [0b1111, 0b0000, 0b1111, 0b0000], // bars
    [0b1010, 0b0101, 0b1010, 0b0101], // checker
    [0b1100, 0b1100, 0b0011, 0b0011], // blocks
];

/// Alternately lighter and darker than the background in every channel, so a
/// glyph's sign relative to the background depends on its color and pooled
/// pixels alone say little about glyph identity.
const COLORS: [[f64; 3]; 4] = [[0.95, 0.75, 0.7], [0.05, 0.1, 0.3], [0.7, 0.95, 0.8], [0.3, 0.05, 0.1]];

pub const BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    /// Cells per side.
    pub cells: usize,
    pub num_glyphs: usize,
    pub num_colors: usize,
    pub seq_len: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    /// Upper bound on placements; `None` uses the most a single caption of
    /// `seq_len` tokens can describe.
    pub max_placements: Option<usize>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 32,
            cells: 4,
            num_glyphs: 8,
            num_colors: 4,
            seq_len: 24,
            text_dim: 32,
            vocab_size: 64,
            max_placements: None,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.image_size % self.cells != 0 || self.image_size / self.cells < 4 {
            return config_err(format!(
                "image_size {} must be a multiple of cells {} with cells at least 4 pixels wide",
                self.image_size, self.cells
            ));
        }
        if self.image_size / self.cells % 4 != 0 {
            return config_err("cell width must be a multiple of the 4-pixel glyph bitmap");
        }
        if !(1..=GLYPHS.len()).contains(&self.num_glyphs) || !(1..=COLORS.len()).contains(&self.num_colors) {
            return config_err(format!("at most {} glyphs and {} colors", GLYPHS.len(), COLORS.len()));
        }
        let needed = 2 + self.num_glyphs + self.num_colors + self.cells * self.cells;
        if needed > self.vocab_size {
            return config_err(format!("vocabulary needs {needed} tokens but vocab_size is {}", self.vocab_size));
        }
        if self.text_dim == 0 {
            return config_err("text_dim must be positive");
        }
        let max = self.placement_limit();
        if max < 2 {
            return config_err(format!("seq_len {} and {} cells allow fewer than 2 placements", self.seq_len, self.cells));
        }
        Ok(())
    }

    /// Placements per scene are drawn from `2..=placement_limit()`.
    pub fn placement_limit(&self) -> usize {
        let by_text = (self.seq_len + 1) / 4;
        let cap = self.max_placements.unwrap_or(usize::MAX);
        by_text.min(self.cells * self.cells).min(cap)
    }

    pub fn cell_pixels(&self) -> usize {
        self.image_size / self.cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub glyph: usize,
    pub color: usize,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub cells: usize,
    pub placements: Vec<Placement>,
    pub seed: u64,
}

impl SceneSpec {
    /// Probe label: the subject glyph, which fills a strict majority of
    /// the occupied cells.
    pub fn subject_glyph(&self) -> usize {
        self.placements[0].glyph
    }
}

pub fn gen_scene(cfg: &DataConfig, seed: u64) -> SceneSpec {
    let mut rng = rng_for(seed, Stream::Data, 0);
    let n_cells = cfg.cells * cfg.cells;
    let count = rng.gen_range(2..=cfg.placement_limit());
    let mut cells: Vec<usize> = (0..n_cells).collect();
    cells.shuffle(&mut rng);
    // The subject takes a strict majority of placements so the label is
    // recoverable from the image; the rest are other glyphs.
    let subject = rng.gen_range(0..cfg.num_glyphs);
    let majority = count / 2 + 1;
    let placements = cells[..count]
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            let glyph = if i < majority || cfg.num_glyphs == 1 {
                subject
            } else {
                (subject + rng.gen_range(1..cfg.num_glyphs)) % cfg.num_glyphs
            };
            Placement {
                glyph,
                color: rng.gen_range(0..cfg.num_colors),
                cell,
            }
        })
        .collect();
    SceneSpec {
        cells: cfg.cells,
        placements,
        seed,
    }
}

/// `[H×W×3]` image in `[0, 1]`; empty cells and glyph gaps are background.
pub fn render<T: Scalar>(scene: &SceneSpec, h: usize, w: usize) -> Result<Tensor<T>> {
    if scene.cells == 0 || h % scene.cells != 0 || w % scene.cells != 0 {
        return Err(domain_error("render", format!("{h}x{w} not divisible by {} cells", scene.cells)));
    }
    let (ch, cw) = (h / scene.cells, w / scene.cells);
    if ch % 4 != 0 || cw % 4 != 0 {
        return Err(domain_error("render", "cell size must be a multiple of 4 pixels"));
    }
    let mut img = vec![T::lit(BACKGROUND); h * w * 3];
    for p in &scene.placements {
        let (r0, c0) = ((p.cell / scene.cells) * ch, (p.cell % scene.cells) * cw);
        let bmp = &GLYPHS[p.glyph];
        let color = COLORS[p.color];
        for y in 0..ch {
            for x in 0..cw {
                let on = bmp[y * 4 / ch] >> (3 - x * 4 / cw) & 1 == 1;
                if on {
                    let base = ((r0 + y) * w + c0 + x) * 3;
                    for k in 0..3 {
                        img[base + k] = T::lit(color[k]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![h, w, 3], img)?)
}

/// Maps `[0, 1]` pixels to `[-1, 1]`, the range the encoder is fed.
pub fn normalize_pixels<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let two = T::lit(2.0);
    image.map(|v| v * two - T::one())
}

/// Token ids: `PAD=0`, `SEP=1`, then glyphs, colors and cell positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub num_glyphs: usize,
    pub num_colors: usize,
    pub num_cells: usize,
    pub size: usize,
    /// Frozen `[V × d_t]` table; row `PAD` is zero.
    pub table: Tensor<f64>,
    /// Frozen `[d_t × d_t]` clause mixing, the stand-in for a pretrained
    /// contextual text encoder.
    pub mix: Tensor<f64>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const SEP: u32 = 1;

    pub fn new(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, Stream::Vocab, 0);
        let scale = 1.0 / (cfg.text_dim as f64).sqrt();
        let mut table: Vec<f64> = (0..cfg.vocab_size * cfg.text_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v * scale)
            .collect();
        table[..cfg.text_dim].iter_mut().for_each(|v| *v = 0.0);
        let mix: Vec<f64> = (0..cfg.text_dim * cfg.text_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v * scale)
            .collect();
        Ok(Vocabulary {
            mix: Tensor::new(vec![cfg.text_dim, cfg.text_dim], mix)?,
            num_glyphs: cfg.num_glyphs,
            num_colors: cfg.num_colors,
            num_cells: cfg.cells * cfg.cells,
            size: cfg.vocab_size,
            table: Tensor::new(vec![cfg.vocab_size, cfg.text_dim], table)?,
        })
    }

    pub fn glyph(&self, g: usize) -> u32 {
        (2 + g) as u32
    }

    pub fn color(&self, c: usize) -> u32 {
        (2 + self.num_glyphs + c) as u32
    }

    pub fn cell(&self, c: usize) -> u32 {
        (2 + self.num_glyphs + self.num_colors + c) as u32
    }

    /// Decodes a caption back into the placements it mentions.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<Placement>> {
        let live: Vec<u32> = ids.iter().copied().filter(|&t| t != Self::PAD).collect();
        let mut out = Vec::new();
        for chunk in live.split(|&t| t == Self::SEP) {
            let &[c, g, cell] = chunk else {
                return Err(domain_error("decode", format!("malformed triple {chunk:?}")));
            };
            let off = |t: u32, base: usize, n: usize| -> Result<usize> {
                let t = t as usize;
                if t >= base && t < base + n {
                    Ok(t - base)
                } else {
                    Err(domain_error("decode", format!("token {t} outside [{base}, {})", base + n)))
                }
            };
            out.push(Placement {
                color: off(c, 2 + self.num_glyphs, self.num_colors)?,
                glyph: off(g, 2, self.num_glyphs)?,
                cell: off(cell, 2 + self.num_glyphs + self.num_colors, self.num_cells)?,
            });
        }
        Ok(out)
    }

    /// Contextual word embeddings: row `s` is `E[t_s] + (Σ_{clause} E)·M`,
    /// where the clause is the `SEP`-delimited span holding token `s`. The
    /// mixing lets a cell token carry the glyph and color it is bound to.
    /// `SEP` rows are plain lookups and `PAD` rows are zero.
    pub fn embed<T: Scalar>(&self, ids: &[u32]) -> Result<WordSequence<T>> {
        let dt = self.table.shape()[1];
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.size) {
            return Err(domain_error("embed", format!("token id {id} >= vocabulary size {}", self.size)));
        }
        let mut rows: Vec<f64> = ids.iter().flat_map(|&id| self.table.row(id as usize).to_vec()).collect();
        let mut start = 0;
        while start < ids.len() {
            let end = (start..ids.len())
                .find(|&i| ids[i] == Self::SEP || ids[i] == Self::PAD)
                .unwrap_or(ids.len());
            if end > start {
                let mut sum = vec![0.0; dt];
                for &id in &ids[start..end] {
                    sum.iter_mut().zip(self.table.row(id as usize)).for_each(|(a, &b)| *a += b);
                }
                let mut ctx = vec![0.0; dt];
                for (k, &sk) in sum.iter().enumerate() {
                    ctx.iter_mut().zip(self.mix.row(k)).for_each(|(c, &m)| *c += sk * m);
                }
                for i in start..end {
                    rows[i * dt..(i + 1) * dt].iter_mut().zip(&ctx).for_each(|(r, &c)| *r += c);
                }
            }
            start = end + 1;
        }
        let data = rows.into_iter().map(T::lit).collect();
        let live = ids.iter().map(|&t| t != Self::PAD).collect();
        WordSequence::new(Tensor::new(vec![ids.len(), dt], data)?, ids.to_vec(), live)
    }

    pub fn embed_batch<T: Scalar>(&self, captions: &[Vec<u32>]) -> Result<CaptionBatch<T>> {
        CaptionBatch::new(captions.iter().map(|c| self.embed(c)).collect::<Result<_>>()?)
    }
}

/// N captions over random non-empty subsets of the placements; every
/// placement is mentioned by at least one caption. Each caption is
/// `color glyph cell [SEP color glyph cell]...` padded to `seq_len`.
pub fn gen_captions(scene: &SceneSpec, vocab: &Vocabulary, n: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if n == 0 {
        return Err(domain_error("gen_captions", "N must be at least 1"));
    }
    let k = scene.placements.len();
    if 4 * k - 1 > seq_len {
        return Err(domain_error("gen_captions", format!("{k} placements do not fit in {seq_len} tokens")));
    }
    let mut rng = rng_for(seed, Stream::Captions, 0);
    let mut subsets: Vec<Vec<bool>> = (0..n)
        .map(|_| {
            let mut s: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
            if !s.iter().any(|&b| b) {
                s[rng.gen_range(0..k)] = true;
            }
            s
        })
        .collect();
    for j in 0..k {
        if !subsets.iter().any(|s| s[j]) {
            let c = rng.gen_range(0..n);
            subsets[c][j] = true;
        }
    }
    Ok(subsets
        .into_iter()
        .map(|s| {
            let mut chosen: Vec<&Placement> = scene.placements.iter().zip(&s).filter(|(_, &b)| b).map(|(p, _)| p).collect();
            chosen.shuffle(&mut rng);
            let mut ids = Vec::with_capacity(seq_len);
            for (i, p) in chosen.iter().enumerate() {
                if i > 0 {
                    ids.push(Vocabulary::SEP);
                }
                ids.extend([vocab.color(p.color), vocab.glyph(p.glyph), vocab.cell(p.cell)]);
            }
            ids.resize(seq_len, Vocabulary::PAD);
            ids
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub index: u64,
    pub seed: u64,
    pub image: Tensor<T>,
    pub scene: SceneSpec,
    pub captions: Vec<Vec<u32>>,
    pub label: usize,
}

/// Deterministic, index-addressed stream of samples.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub cfg: DataConfig,
    pub vocab: Vocabulary,
}

impl SyntheticDataset {
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        Ok(SyntheticDataset {
            cfg: cfg.clone(),
            vocab: Vocabulary::new(cfg)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_glyphs
    }

    pub fn sample_seed(&self, index: u64) -> u64 {
        crate::rng::derive_seed(self.cfg.seed, Stream::Data, index)
    }

    pub fn sample<T: Scalar>(&self, index: u64, n_captions: usize) -> Result<Sample<T>> {
        let seed = self.sample_seed(index);
        let scene = gen_scene(&self.cfg, seed);
        let image = render(&scene, self.cfg.image_size, self.cfg.image_size)?;
        let captions = gen_captions(&scene, &self.vocab, n_captions, self.cfg.seq_len, seed)?;
        Ok(Sample {
            index,
            seed,
            label: scene.subject_glyph(),
            image,
            scene,
            captions,
        })
    }

    /// Sample indices of one epoch over `0..len`, shuffled by `epoch`.
    pub fn epoch_order(&self, epoch: u64, len: usize) -> Vec<u64> {
        let mut order: Vec<u64> = (0..len as u64).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, Stream::Shuffle, epoch));
        order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub seed: u64,
    pub label: usize,
    pub file: String,
    pub captions: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub n_captions: usize,
    pub image_shape: [usize; 3],
    pub samples: Vec<ManifestEntry>,
}

/// Writes `count` samples as raw little-endian f32 blobs plus `manifest.json`.
pub fn export_dataset(ds: &SyntheticDataset, dir: &Path, count: u64, n_captions: usize) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let s = ds.cfg.image_size;
    let mut samples = Vec::with_capacity(count as usize);
    for i in 0..count {
        let smp: Sample<f32> = ds.sample(i, n_captions)?;
        let file = format!("image_{i:06}.f32");
        let bytes: Vec<u8> = smp.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        samples.push(ManifestEntry {
            index: i,
            seed: smp.seed,
            label: smp.label,
            file,
            captions: smp.captions,
        });
    }
    let manifest = Manifest {
        config: ds.cfg.clone(),
        n_captions,
        image_shape: [s, s, 3],
        samples,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads an exported directory back: manifest plus images.
pub fn import_dataset(dir: &Path) -> Result<(Manifest, Vec<Tensor<f32>>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let shape = manifest.image_shape.to_vec();
    let n: usize = shape.iter().product();
    let mut images = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let bytes = fs::read(dir.join(&e.file))?;
        if bytes.len() != 4 * n {
            return Err(Error::Data(format!("{}: expected {} bytes, found {}", e.file, 4 * n, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        images.push(Tensor::new(shape.clone(), data)?);
    }
    Ok((manifest, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig::default()
    }

    #[test]
    fn scenes_are_deterministic_and_collision_free() {
        let c = cfg();
        assert_eq!(gen_scene(&c, 5), gen_scene(&c, 5));
        for seed in 0..10_000 {
            let s = gen_scene(&c, seed);
            let mut cells: Vec<usize> = s.placements.iter().map(|p| p.cell).collect();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), s.placements.len());
            assert!((2..=c.placement_limit()).contains(&s.placements.len()));
            let subject = s.subject_glyph();
            let hits = s.placements.iter().filter(|p| p.glyph == subject).count();
            assert!(2 * hits > s.placements.len(), "subject must be a strict majority");
        }
        assert_eq!(c.placement_limit(), 6);
    }

    #[test]
    fn render_examples() {
        let empty = SceneSpec {
            cells: 4,
            placements: vec![],
            seed: 0,
        };
        let img = render::<f32>(&empty, 32, 32).unwrap();
        assert!(img.data().iter().all(|&v| v == BACKGROUND as f32));

        let a = gen_scene(&cfg(), 3);
        let mut b = a.clone();
        b.placements[0].glyph = (b.placements[0].glyph + 1) % 8;
        let (ia, ib) = (render::<f64>(&a, 32, 32).unwrap(), render::<f64>(&b, 32, 32).unwrap());
        let cell = a.placements[0].cell;
        let (r0, c0) = ((cell / 4) * 8, (cell % 4) * 8);
        let mut differs = false;
        for y in 0..32 {
            for x in 0..32 {
                let inside = (r0..r0 + 8).contains(&y) && (c0..c0 + 8).contains(&x);
                for k in 0..3 {
                    let i = (y * 32 + x) * 3 + k;
                    if ia.data()[i] != ib.data()[i] {
                        assert!(inside);
                        differs = true;
                    }
                }
            }
        }
        assert!(differs);
        assert_eq!(ia, render::<f64>(&a, 32, 32).unwrap());
        assert!(ia.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn glyph_color_pairs_render_distinctly() {
        let mut seen = Vec::new();
        for glyph in 0..8 {
            for color in 0..4 {
                let s = SceneSpec {
                    cells: 4,
                    placements: vec![Placement { glyph, color, cell: 0 }],
                    seed: 0,
                };
                let img = render::<f64>(&s, 16, 16).unwrap();
                assert!(!seen.contains(&img));
                seen.push(img);
            }
        }
    }

    #[test]
    fn captions_cover_scene() {
        let c = cfg();
        let v = Vocabulary::new(&c).unwrap();
        let scene = gen_scene(&c, 11);
        let one = gen_captions(&scene, &v, 1, c.seq_len, 1).unwrap();
        let mut got = v.decode(&one[0]).unwrap();
        got.sort_by_key(|p| p.cell);
        let mut want = scene.placements.clone();
        want.sort_by_key(|p| p.cell);
        assert_eq!(got, want);
        for seed in 0..1000 {
            let scene = gen_scene(&c, seed);
            let caps = gen_captions(&scene, &v, 4, c.seq_len, seed).unwrap();
            let mut union: Vec<Placement> = Vec::new();
            for cap in &caps {
                assert_eq!(cap.len(), c.seq_len);
                assert!(cap.iter().all(|&t| (t as usize) < c.vocab_size));
                let d = v.decode(cap).unwrap();
                assert!(!d.is_empty());
                for p in d {
                    assert!(scene.placements.contains(&p));
                    if !union.contains(&p) {
                        union.push(p);
                    }
                }
            }
            assert_eq!(union.len(), scene.placements.len());
        }
    }

    #[test]
    fn embedding_lookup() {
        let v = Vocabulary::new(&cfg()).unwrap();
        let (a, b, c) = (v.color(1), v.glyph(3), v.cell(5));
        let ids = vec![a, b, c, Vocabulary::SEP, v.color(0), v.glyph(3), v.cell(7), Vocabulary::PAD];
        let w: WordSequence<f64> = v.embed(&ids).unwrap();
        // Oracle: explicit clause sums pushed through the mixing matrix.
        let e = |t: u32| v.table.row(t as usize).to_vec();
        let dt = 32;
        let expect = |tok: u32, clause: &[u32]| -> Vec<f64> {
            (0..dt)
                .map(|j| {
                    let mixed: f64 = (0..dt)
                        .map(|k| clause.iter().map(|&t| e(t)[k]).sum::<f64>() * v.mix.row(k)[j])
                        .sum();
                    e(tok)[j] + mixed
                })
                .collect()
        };
        for (i, (tok, clause)) in [(a, &ids[0..3]), (b, &ids[0..3]), (c, &ids[0..3]), (ids[5], &ids[4..7])].iter().enumerate() {
            let row = if i < 3 { i } else { 5 };
            for (x, y) in w.embeddings.row(row).iter().zip(expect(*tok, clause)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(w.embeddings.row(3), v.table.row(Vocabulary::SEP as usize));
        assert!(w.embeddings.row(7).iter().all(|&x| x == 0.0));
        // Same glyph in different clauses embeds differently.
        assert_ne!(w.embeddings.row(1), w.embeddings.row(5));
        assert_eq!(w.live, vec![true, true, true, true, true, true, true, false]);
        assert!(v.embed::<f64>(&[64]).is_err());
        assert_eq!(Vocabulary::new(&cfg()).unwrap(), v);
    }

    #[test]
    fn export_import_round_trip() {
        let ds = SyntheticDataset::new(&cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = export_dataset(&ds, dir.path(), 3, 2).unwrap();
        let (m2, imgs) = import_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (i, img) in imgs.iter().enumerate() {
            let s: Sample<f32> = ds.sample(i as u64, 2).unwrap();
            assert_eq!(&s.image, img);
            assert_eq!(s.captions, m.samples[i].captions);
        }
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let ds = SyntheticDataset::new(&cfg()).unwrap();
        let a = ds.epoch_order(2, 50);
        assert_eq!(a, ds.epoch_order(2, 50));
        assert_ne!(a, ds.epoch_order(3, 50));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(DataConfig { cells: 3, ..cfg() }.validate().is_err());
        assert!(DataConfig { vocab_size: 20, ..cfg() }.validate().is_err());
        assert!(DataConfig { seq_len: 6, ..cfg() }.validate().is_err());
    }
}
