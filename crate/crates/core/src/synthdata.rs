//! Procedural nadir aerial scenes with paired height rasters.
//!
//! A scene is flat ground scattered with axis-aligned flat-roofed buildings.
//! Building heights follow a clamped lognormal law, so most pixels are ground
//! (height exactly 0) and a few are very tall. The camera height sets the
//! ground sampling distance: a higher camera sees smaller, more numerous
//! footprints. Roofs and ground are shaded by a Lambertian sun term, and hard
//! shadows are cast away from the sun with a length set by occluder height.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::seed;
use crate::tensor::{hmt, Tensor};

/// Camera heights (meters) the generator accepts.
pub const CAMERA_HEIGHTS: [f64; 4] = [300.0, 380.0, 460.0, 540.0];

/// Height ceiling of the synthetic source preset (meters).
pub const SOURCE_HEIGHT_MAX: f64 = 439.2;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Nominal fraction of ground covered by footprints, in (0, 1).
    pub density: f64,
    /// Lognormal location of building heights (log meters).
    pub height_mu: f64,
    /// Lognormal scale of building heights.
    pub height_sigma: f64,
    /// Heights are clamped to `[0, height_max]` meters.
    pub height_max: f64,
    /// Meters above ground; one of [`CAMERA_HEIGHTS`].
    pub camera_height: f64,
    /// When non-empty, every scene draws its camera height uniformly from
    /// this list instead of using `camera_height`.
    #[serde(default)]
    pub camera_mix: Vec<f64>,
    /// Ground sampling distance (m/px) at a 300 m camera height.
    pub gsd_at_300: f64,
    /// Footprint side length range in meters.
    pub footprint_min: f64,
    pub footprint_max: f64,
    /// Direction the light comes from, degrees clockwise from image up.
    pub sun_azimuth: f64,
    /// Sun elevation above the horizon, degrees.
    pub sun_elevation: f64,
    pub shadows: bool,
    pub ground_albedo: [f64; 3],
    /// Roof albedo shift towards blue per unit of `h / (h + 20)`.
    pub roof_tint: f64,
    /// Fraction of light that reaches shadowed surfaces.
    pub ambient: f64,
}

impl SceneSpec {
    /// Synthetic city used for pretraining, seen from every camera height.
    pub fn source() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            density: 0.3,
            height_mu: 2.3,
            height_sigma: 1.0,
            height_max: SOURCE_HEIGHT_MAX,
            camera_height: 300.0,
            camera_mix: CAMERA_HEIGHTS.to_vec(),
            gsd_at_300: 1.0,
            footprint_min: 5.0,
            footprint_max: 14.0,
            sun_azimuth: 135.0,
            sun_elevation: 55.0,
            shadows: true,
            ground_albedo: [0.42, 0.40, 0.36],
            roof_tint: 0.35,
            ambient: 0.35,
        }
    }

    /// Built-in presets by name: `source`, `ahn`, `arg`.
    pub fn preset(name: &str) -> Result<Self> {
        let src = Self::source();
        match name {
            "source" => Ok(src),
            // Lower-rise city seen from higher up under a lower sun.
            "ahn" => Ok(SceneSpec {
                height_mu: 2.0,
                height_sigma: 0.8,
                height_max: 195.8,
                camera_height: 460.0,
                camera_mix: vec![],
                sun_azimuth: 160.0,
                sun_elevation: 48.0,
                ground_albedo: [0.36, 0.40, 0.33],
                roof_tint: 0.3,
                ..src
            }),
            "arg" => Ok(SceneSpec {
                density: 0.22,
                height_mu: 1.8,
                height_sigma: 0.7,
                height_max: 92.7,
                camera_height: 540.0,
                camera_mix: vec![],
                sun_azimuth: 110.0,
                sun_elevation: 62.0,
                ground_albedo: [0.48, 0.44, 0.38],
                roof_tint: 0.3,
                ..src
            }),
            other => Err(Error::invalid(format!("unknown scene preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid(format!(
                "degenerate raster extents {}x{}",
                self.height, self.width
            )));
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::invalid(format!(
                "density {} outside (0, 1)",
                self.density
            )));
        }
        if let Some(c) = self.camera_mix.iter().find(|c| !CAMERA_HEIGHTS.contains(c)) {
            return Err(Error::invalid(format!(
                "camera height {c} in camera_mix not one of {CAMERA_HEIGHTS:?}"
            )));
        }
        if !CAMERA_HEIGHTS.contains(&self.camera_height) {
            return Err(Error::invalid(format!(
                "camera height {} not one of {CAMERA_HEIGHTS:?}",
                self.camera_height
            )));
        }
        if !(self.height_sigma > 0.0) || !self.height_mu.is_finite() {
            return Err(Error::invalid("lognormal parameters must be finite, sigma > 0"));
        }
        if !(self.height_max > 0.0) {
            return Err(Error::invalid("height_max must be positive"));
        }
        if !(self.gsd_at_300 > 0.0) {
            return Err(Error::invalid("gsd_at_300 must be positive"));
        }
        if !(self.footprint_min > 0.0 && self.footprint_max >= self.footprint_min) {
            return Err(Error::invalid("footprint range must satisfy 0 < min <= max"));
        }
        if !(self.sun_elevation > 0.0 && self.sun_elevation <= 90.0) {
            return Err(Error::invalid("sun elevation must be in (0, 90] degrees"));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::invalid("ambient must be in [0, 1]"));
        }
        Ok(())
    }

    /// Meters per pixel at `camera_height`.
    pub fn gsd(&self) -> f64 {
        self.gsd_at_300 * self.camera_height / 300.0
    }
}

/// One rendered scene: `rgb` is `[3, H, W]`, `height` is `[1, H, W]` meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub rgb: Tensor<f32>,
    pub height: Tensor<f32>,
}

struct Building {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
    h: f64,
    albedo: [f64; 3],
}

pub fn generate_scene(spec: &SceneSpec, scene_seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = seed::rng(scene_seed, "scene");
    let camera = match spec.camera_mix.len() {
        0 => spec.camera_height,
        n => spec.camera_mix[rng.random_range(0..n)],
    };
    let gsd = spec.gsd_at_300 * camera / 300.0;

    let side_px = |m: f64| ((m / gsd).round() as usize).clamp(1, h.min(w));
    let mean_side = 0.5 * (spec.footprint_min + spec.footprint_max) / gsd;
    let expected = spec.density * (h * w) as f64 / (mean_side * mean_side).max(1.0);
    let count = (expected + rng.random::<f64>()).floor() as usize;

    let lognormal = LogNormal::new(spec.height_mu, spec.height_sigma)
        .map_err(|e| Error::invalid(format!("height distribution: {e}")))?;
    let mut buildings = Vec::with_capacity(count);
    for _ in 0..count {
        let bh = side_px(rng.random_range(spec.footprint_min..=spec.footprint_max));
        let bw = side_px(rng.random_range(spec.footprint_min..=spec.footprint_max));
        let y0 = rng.random_range(0..=h - bh);
        let x0 = rng.random_range(0..=w - bw);
        let height = lognormal.sample(&mut rng).clamp(0.0, spec.height_max);
        let grey = rng.random_range(0.45..0.75);
        let t = spec.roof_tint * height / (height + 20.0);
        buildings.push(Building {
            y0,
            x0,
            y1: y0 + bh,
            x1: x0 + bw,
            h: height,
            albedo: [grey - t, grey - 0.3 * t, grey + t],
        });
    }

    let mut heights = vec![0.0f64; h * w];
    let mut albedo = vec![spec.ground_albedo; h * w];
    for b in &buildings {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                if b.h > heights[y * w + x] {
                    heights[y * w + x] = b.h;
                    albedo[y * w + x] = b.albedo;
                }
            }
        }
    }

    let elev = spec.sun_elevation.to_radians();
    let direct = elev.sin();
    let lit = if spec.shadows {
        shadow_mask(&heights, h, w, spec.sun_azimuth.to_radians(), elev, gsd)
    } else {
        vec![true; h * w]
    };

    let mut rgb = vec![0.0f32; 3 * h * w];
    for q in 0..h * w {
        let light = spec.ambient + (1.0 - spec.ambient) * direct * if lit[q] { 1.0 } else { 0.0 };
        for ch in 0..3 {
            rgb[ch * h * w + q] = (albedo[q][ch].clamp(0.0, 1.0) * light) as f32;
        }
    }
    Ok(Scene {
        rgb: Tensor::new(&[3, h, w], rgb)?,
        height: Tensor::new(&[1, h, w], heights.iter().map(|&v| v as f32).collect())?,
    })
}

/// Marches from every pixel towards the sun; the pixel is shadowed when some
/// surface along the ray rises above the sun line.
fn shadow_mask(heights: &[f64], h: usize, w: usize, azimuth: f64, elev: f64, gsd: f64) -> Vec<bool> {
    let peak = heights.iter().cloned().fold(0.0, f64::max);
    let tan = elev.tan();
    let reach = (peak / tan / gsd).ceil() as usize + 1;
    // Image up is -y.
    let (dx, dy) = (azimuth.sin(), -azimuth.cos());
    let mut lit = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let base = heights[y * w + x];
            let mut t = 0.5;
            while t <= reach as f64 {
                let sx = (x as f64 + 0.5 + dx * t).floor();
                let sy = (y as f64 + 0.5 + dy * t).floor();
                if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                    break;
                }
                let occ = heights[sy as usize * w + sx as usize];
                if occ > base + t * gsd * tan {
                    lit[y * w + x] = false;
                    break;
                }
                t += 0.5;
            }
        }
    }
    lit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Relative paths of one image/height pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub image: String,
    pub height: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// On-disk description of a generated dataset, stored as `manifest.json` at
/// the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub scene: SceneSpec,
    pub counts: SplitCounts,
    pub train: Vec<SamplePaths>,
    pub val: Vec<SamplePaths>,
    pub test: Vec<SamplePaths>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// A loaded pair: `rgb` `[3, H, W]`, `height` `[1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: Tensor<f32>,
    pub height: Tensor<f32>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[SamplePaths] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let listed = SplitCounts {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        };
        if listed != self.counts {
            return Err(Error::invalid(format!(
                "manifest `{}` counts {:?} disagree with listed pairs {:?}",
                self.name, self.counts, listed
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str, root: &Path) -> std::result::Result<Self, String> {
        let mut m: DatasetManifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        m.root = root.to_path_buf();
        m.validate().map_err(|e| e.to_string())?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reads `manifest.json` from a dataset root, or the manifest file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::from_json(&text, &root).map_err(|m| Error::format(&file, m))
    }

    pub fn load_sample(&self, paths: &SamplePaths) -> Result<Sample> {
        let rgb = hmt::read::<f32>(&self.root.join(&paths.image))?;
        let height = hmt::read::<f32>(&self.root.join(&paths.height))?;
        if rgb.rank() != 3 || rgb.dims()[0] != 3 {
            return Err(Error::format(
                self.root.join(&paths.image),
                format!("expected [3, H, W] image, got {:?}", rgb.dims()),
            ));
        }
        if height.rank() != 3 || height.dims()[0] != 1 || height.dims()[1..] != rgb.dims()[1..] {
            return Err(Error::shape(format!(
                "height raster {} {:?} does not match image {:?}",
                paths.height,
                height.dims(),
                rgb.dims()
            )));
        }
        Ok(Sample { rgb, height })
    }

    /// Loads every pair of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        par::map_range(self.split(split).len(), |i| {
            self.load_sample(&self.split(split)[i])
        })
        .into_iter()
        .collect()
    }
}

/// Renders a dataset under `out_dir` with disjoint scene seeds per split and
/// writes its manifest.
pub fn generate_dataset(
    name: &str,
    spec: &SceneSpec,
    counts: SplitCounts,
    root_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut manifest = DatasetManifest {
        name: name.to_string(),
        seed: root_seed,
        scene: spec.clone(),
        counts,
        train: vec![],
        val: vec![],
        test: vec![],
        root: out_dir.to_path_buf(),
    };
    for split in Split::ALL {
        let n = match split {
            Split::Train => counts.train,
            Split::Val => counts.val,
            Split::Test => counts.test,
        };
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let scenes: Vec<Result<Scene>> = par::map_range(n, |i| {
            generate_scene(spec, seed::derive_seed(root_seed, &format!("{}/{i}", split.name())))
        });
        let mut list = Vec::with_capacity(n);
        for (i, scene) in scenes.into_iter().enumerate() {
            let scene = scene?;
            let paths = SamplePaths {
                image: format!("{}/img_{i}.hmt", split.name()),
                height: format!("{}/hgt_{i}.hmt", split.name()),
            };
            hmt::write(&out_dir.join(&paths.image), &scene.rgb)?;
            hmt::write(&out_dir.join(&paths.height), &scene.height)?;
            list.push(paths);
        }
        match split {
            Split::Train => manifest.train = list,
            Split::Val => manifest.val = list,
            Split::Test => manifest.test = list,
        }
    }
    manifest.save()?;
    Ok(manifest)
}

/// Number of training pairs kept at `pct` percent (rounded up).
pub fn fewshot_count(n_train: usize, pct: f64) -> usize {
    (n_train as f64 * pct / 100.0 - 1e-9).ceil().max(0.0) as usize
}

/// Uniformly random `ceil(pct% * n_train)` training pairs without
/// replacement, kept in manifest order. Validation and test are untouched.
pub fn subsample_fewshot(manifest: &DatasetManifest, pct: f64, seed: u64) -> Result<DatasetManifest> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::invalid(format!("few-shot percentage {pct} outside (0, 100]")));
    }
    let n = manifest.train.len();
    let keep = fewshot_count(n, pct);
    if keep == 0 {
        return Err(Error::invalid(format!(
            "{pct}% of {n} training pairs selects nothing"
        )));
    }
    let mut rng = seed::rng(seed, &format!("fewshot/{pct}"));
    let mut picked = index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    let mut out = manifest.clone();
    out.name = format!("{}@{pct}%", manifest.name);
    out.train = picked.iter().map(|&i| manifest.train[i].clone()).collect();
    out.counts.train = keep;
    Ok(out)
}
