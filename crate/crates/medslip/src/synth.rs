//! Deterministic synthetic corpus: images whose anatomy terms are grid
//! cells and whose pathology terms are glyph shapes, with exact masks,
//! reports in the constrained grammar, and an 80/10/10 split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::report::{ingest_triplets, write_triplets, ReportGrammar, TripletRecord, UNSPECIFIED_ANATOMY};
use crate::rng;

/// Renderable pathology shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Glyph {
    Disc,
    Ring,
    Cross,
    Bar,
    Speckle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub pathology_glyphs: Vec<(String, Glyph)>,
    pub max_findings: usize,
    pub negation_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 96,
            grid_rows: 3,
            grid_cols: 2,
            pathology_glyphs: vec![
                ("disc".into(), Glyph::Disc),
                ("ring".into(), Glyph::Ring),
                ("cross".into(), Glyph::Cross),
                ("bar".into(), Glyph::Bar),
                ("speckle".into(), Glyph::Speckle),
            ],
            max_findings: 3,
            negation_rate: 0.3,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

const ROW_NAMES: [&[&str]; 3] = [&["central"], &["upper", "lower"], &["upper", "middle", "lower"]];
const COL_NAMES: [&[&str]; 3] = [&[""], &["left", "right"], &["left", "center", "right"]];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_rows * self.grid_cols;
        if cells < 2 {
            return Err(Error::Config(format!("grid needs at least 2 cells, got {cells}")));
        }
        if self.grid_rows == 0 || self.grid_rows > 3 || self.grid_cols == 0 || self.grid_cols > 3 {
            return Err(Error::Config("grid rows and cols must be between 1 and 3".into()));
        }
        if self.pathology_glyphs.len() < 2 {
            return Err(Error::Config("need at least 2 pathology glyphs".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (term, _) in &self.pathology_glyphs {
            if term.trim().is_empty() || *term != term.to_lowercase() {
                return Err(Error::Config(format!("pathology term {term:?} must be lowercase")));
            }
            if !seen.insert(term) {
                return Err(Error::Config(format!("duplicate pathology term {term:?}")));
            }
        }
        if self.max_findings > cells {
            return Err(Error::Config(format!(
                "max findings {} exceeds the {cells} grid cells",
                self.max_findings
            )));
        }
        if !(0.0..=1.0).contains(&self.negation_rate) {
            return Err(Error::Config(format!(
                "negation rate {} outside [0,1]",
                self.negation_rate
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std {} must be nonnegative", self.noise_std)));
        }
        if self.image_size % self.grid_rows != 0 || self.image_size % self.grid_cols != 0 {
            return Err(Error::Config(format!(
                "image size {} must divide evenly into a {}x{} grid",
                self.image_size, self.grid_rows, self.grid_cols
            )));
        }
        if self.image_size < crate::backbone::MIN_SIDE {
            return Err(Error::Config(format!(
                "image size {} below the {}px minimum",
                self.image_size,
                crate::backbone::MIN_SIDE
            )));
        }
        Ok(())
    }

    /// Cell names in row-major order, e.g. "upper left zone".
    pub fn anatomy_terms(&self) -> Vec<String> {
        let rows = ROW_NAMES[self.grid_rows - 1];
        let cols = COL_NAMES[self.grid_cols - 1];
        let mut out = Vec::with_capacity(self.grid_rows * self.grid_cols);
        for r in rows {
            for c in cols {
                if c.is_empty() {
                    out.push(format!("{r} zone"));
                } else {
                    out.push(format!("{r} {c} zone"));
                }
            }
        }
        out
    }

    pub fn pathology_terms(&self) -> Vec<String> {
        self.pathology_glyphs.iter().map(|(t, _)| t.clone()).collect()
    }

    pub fn grammar(&self) -> ReportGrammar {
        ReportGrammar::new(self.anatomy_terms(), self.pathology_terms())
    }

    fn cell_dims(&self) -> (usize, usize) {
        (self.image_size / self.grid_rows, self.image_size / self.grid_cols)
    }

    /// Pixel bounds (y0, x0, y1, x1) of a cell, end-exclusive.
    pub fn cell_bounds(&self, cell: usize) -> (usize, usize, usize, usize) {
        let (ch, cw) = self.cell_dims();
        let r = cell / self.grid_cols;
        let c = cell % self.grid_cols;
        (r * ch, c * cw, (r + 1) * ch, (c + 1) * cw)
    }
}

/// Ground truth for one rendered finding.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub pathology: String,
    pub anatomy: String,
    /// (x0, y0, x1, y1), inclusive pixel bounds.
    pub bbox: [usize; 4],
    pub mask: Array2<u8>,
}

#[derive(Debug, Clone)]
pub struct SynthStudy {
    pub study_id: String,
    pub image: ImageTensor,
    pub report: String,
    pub triplets: Vec<TripletRecord>,
    pub regions: Vec<Region>,
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Paints the glyph support into `mask` centered in the given cell bounds.
/// Intensity placement happens later so the mask is exactly the support.
fn paint_glyph(
    mask: &mut Array2<u8>,
    glyph: Glyph,
    bounds: (usize, usize, usize, usize),
    rng: &mut impl Rng,
) {
    let (y0, x0, y1, x1) = bounds;
    let (ch, cw) = (y1 - y0, x1 - x0);
    let cy = y0 as f64 + ch as f64 / 2.0;
    let cx = x0 as f64 + cw as f64 / 2.0;
    let radius = (ch.min(cw) as f64) / 2.0 - 3.0;
    let mut paint = |y: usize, x: usize| mask[[y, x]] = 1;
    match glyph {
        Glyph::Disc => {
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        paint(y, x);
                    }
                }
            }
        }
        Glyph::Ring => {
            let inner = radius - 7.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let d2 = dy * dy + dx * dx;
                    if d2 <= radius * radius && d2 >= inner * inner {
                        paint(y, x);
                    }
                }
            }
        }
        Glyph::Cross => {
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let horizontal = dy.abs() <= 2.5 && dx.abs() <= radius;
                    let vertical = dx.abs() <= 2.5 && dy.abs() <= radius;
                    if horizontal || vertical {
                        paint(y, x);
                    }
                }
            }
        }
        Glyph::Bar => {
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy.abs() <= 3.5 && dx.abs() <= radius {
                        paint(y, x);
                    }
                }
            }
        }
        Glyph::Speckle => {
            for _ in 0..12 {
                // rejection-free polar sample inside the glyph radius
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let rad = radius * rng.gen_range(0.0f64..1.0).sqrt();
                let py = (cy + rad * ang.sin()) as usize;
                let px = (cx + rad * ang.cos()) as usize;
                for y in py.saturating_sub(2)..py + 2 {
                    for x in px.saturating_sub(2)..px + 2 {
                        if y >= y0 && y < y1 && x >= x0 && x < x1 {
                            paint(y, x);
                        }
                    }
                }
            }
        }
    }
}

fn mask_bbox(mask: &Array2<u8>) -> Option<[usize; 4]> {
    let mut bounds: Option<[usize; 4]> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        bounds = Some(match bounds {
            None => [x, y, x, y],
            Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
        });
    }
    bounds
}

/// Generate one study with the caller's rng stream.
pub fn generate_study(cfg: &SynthConfig, study_id: &str, rng: &mut impl Rng) -> Result<SynthStudy> {
    cfg.validate()?;
    let anatomy = cfg.anatomy_terms();
    let cells = anatomy.len();
    let size = cfg.image_size;

    let count = rng.gen_range(0..=cfg.max_findings);
    // draw `count` distinct cells via a partial shuffle
    let mut cell_pool: Vec<usize> = (0..cells).collect();
    for i in 0..count {
        let j = i + rng.gen_range(0..cell_pool.len() - i);
        cell_pool.swap(i, j);
    }

    let mut canvas = Array2::<f64>::zeros((size, size));
    let mut sentences = Vec::new();
    let mut triplets = Vec::new();
    let mut regions = Vec::new();
    let mut used_glyphs = vec![false; cfg.pathology_glyphs.len()];

    for f in 0..count {
        let cell = cell_pool[f];
        let g = rng.gen_range(0..cfg.pathology_glyphs.len());
        used_glyphs[g] = true;
        let (term, glyph) = &cfg.pathology_glyphs[g];
        let intensity = 0.8 * (1.0 + 0.4 * (rng.gen_range(0.0f64..1.0) - 0.5));

        let mut mask = Array2::<u8>::zeros((size, size));
        paint_glyph(&mut mask, *glyph, cfg.cell_bounds(cell), rng);
        for ((y, x), &v) in mask.indexed_iter() {
            if v == 1 {
                canvas[[y, x]] = intensity;
            }
        }
        let bbox = mask_bbox(&mask).expect("glyph paints at least one pixel");
        sentences.push(format!("{} at {}.", capitalize(term), anatomy[cell]));
        triplets.push(TripletRecord::new(study_id, &anatomy[cell], term, true)?);
        regions.push(Region { pathology: term.clone(), anatomy: anatomy[cell].clone(), bbox, mask });
    }

    if rng.gen_range(0.0f64..1.0) < cfg.negation_rate {
        let unused: Vec<usize> =
            (0..cfg.pathology_glyphs.len()).filter(|&g| !used_glyphs[g]).collect();
        if !unused.is_empty() {
            let term = &cfg.pathology_glyphs[unused[rng.gen_range(0..unused.len())]].0;
            if rng.gen_range(0.0f64..1.0) < 0.5 {
                sentences.push(format!("No {term}."));
                triplets.push(TripletRecord::new(study_id, UNSPECIFIED_ANATOMY, term, false)?);
            } else {
                let cell = rng.gen_range(0..cells);
                sentences.push(format!("No {term} at {}.", anatomy[cell]));
                triplets.push(TripletRecord::new(study_id, &anatomy[cell], term, false)?);
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| Error::Config(format!("noise std: {e}")))?;
        canvas.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
    }

    let mut pixels = Array3::zeros((size, size, 1));
    pixels.index_axis_mut(ndarray::Axis(2), 0).assign(&canvas);
    Ok(SynthStudy {
        study_id: study_id.to_string(),
        image: ImageTensor::new(pixels)?,
        report: sentences.join(" "),
        triplets,
        regions,
    })
}

/// One entry in the regions JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionEntry {
    pub pathology: String,
    pub anatomy: String,
    pub bbox: [usize; 4],
    pub mask_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: SynthConfig,
    pub count: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

fn study_name(i: usize) -> String {
    format!("s{i:05}")
}

fn save_gray_png(path: &Path, pixels: impl Fn(usize, usize) -> u8, h: usize, w: usize) -> Result<()> {
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([pixels(y, x)]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("write {}: {e}", path.display()))))
}

/// Load an 8-bit mask PNG back to a binary matrix.
pub fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("read mask {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = u8::from(p.0[0] >= 128);
    }
    Ok(out)
}

/// Write a full corpus under `dir`: images, masks, reports, triplets,
/// regions, and a manifest with the 80/10/10 index split.
pub fn generate_corpus(cfg: &SynthConfig, count: usize, dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("corpus count must be at least 1".into()));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;

    let studies: Vec<SynthStudy> = {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(cfg.seed, "synth-study", i as u64);
                generate_study(cfg, &study_name(i), &mut r)
            })
            .collect::<Result<_>>()?
    };

    let mut report_lines = String::new();
    let mut all_triplets = Vec::new();
    let mut regions_json: BTreeMap<String, Vec<RegionEntry>> = BTreeMap::new();
    for study in &studies {
        let size = cfg.image_size;
        let px = study.image.pixels();
        save_gray_png(
            &dir.join("images").join(format!("{}.png", study.study_id)),
            |y, x| (px[[y, x, 0]] * 255.0).round() as u8,
            size,
            size,
        )?;
        report_lines.push_str(&format!("{}\t{}\n", study.study_id, study.report));
        all_triplets.extend(study.triplets.iter().cloned());
        let mut entries = Vec::new();
        for (k, region) in study.regions.iter().enumerate() {
            let mask_file = format!("masks/{}_{k}.png", study.study_id);
            save_gray_png(
                &dir.join(&mask_file),
                |y, x| region.mask[[y, x]] * 255,
                size,
                size,
            )?;
            entries.push(RegionEntry {
                pathology: region.pathology.clone(),
                anatomy: region.anatomy.clone(),
                bbox: region.bbox,
                mask_file,
            });
        }
        regions_json.insert(study.study_id.clone(), entries);
    }

    fs::write(dir.join("reports.txt"), report_lines)?;
    write_triplets(&dir.join("triplets.jsonl"), &all_triplets)?;
    fs::write(dir.join("regions.json"), serde_json::to_string_pretty(&regions_json)?)?;

    let train_end = count * 8 / 10;
    let val_end = count * 9 / 10;
    let ids: Vec<String> = (0..count).map(study_name).collect();
    let manifest = CorpusManifest {
        config: cfg.clone(),
        count,
        train_ids: ids[..train_end].to_vec(),
        val_ids: ids[train_end..val_end].to_vec(),
        test_ids: ids[val_end..].to_vec(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Which manifest id list to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Handle to a corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    dir: PathBuf,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Input(format!("corpus manifest {}: {e}", manifest_path.display()))
        })?;
        let manifest: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("corpus manifest {}: {e}", manifest_path.display())))?;
        manifest.config.validate()?;
        Ok(Corpus { manifest, dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn split_ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.manifest.train_ids,
            Split::Val => &self.manifest.val_ids,
            Split::Test => &self.manifest.test_ids,
        }
    }

    pub fn image(&self, study_id: &str) -> Result<ImageTensor> {
        ImageTensor::from_png_gray(&self.dir.join("images").join(format!("{study_id}.png")))
    }

    /// All triplets grouped by study, preserving file order within a study.
    pub fn triplets_by_study(&self) -> Result<BTreeMap<String, Vec<TripletRecord>>> {
        let records = ingest_triplets(&self.dir.join("triplets.jsonl"))?;
        let mut map: BTreeMap<String, Vec<TripletRecord>> = BTreeMap::new();
        for r in records {
            map.entry(r.study_id.clone()).or_default().push(r);
        }
        Ok(map)
    }

    pub fn reports(&self) -> Result<BTreeMap<String, String>> {
        let text = fs::read_to_string(self.dir.join("reports.txt"))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let Some((id, report)) = line.split_once('\t') else {
                return Err(Error::Input(format!("reports.txt line {}: missing tab", i + 1)));
            };
            map.insert(id.to_string(), report.to_string());
        }
        Ok(map)
    }

    pub fn regions(&self) -> Result<BTreeMap<String, Vec<RegionEntry>>> {
        let text = fs::read_to_string(self.dir.join("regions.json"))?;
        Ok(serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("regions.json: {e}")))?)
    }

    pub fn load_region_mask(&self, entry: &RegionEntry) -> Result<Array2<u8>> {
        load_mask_png(&self.dir.join(&entry.mask_file))
    }
}
