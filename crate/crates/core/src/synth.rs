//! Deterministic synthetic CT dataset generator.
//!
//! Each slice is a 512x512 grayscale image with a body ellipse and two dark
//! lung fields. COVID patients additionally get a bright textured patch on
//! their central slices; the patch always lies inside the default crop window
//! so it survives preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Manifest, ManifestEntry, PatientLabel};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::preprocess::{SelectionPolicy, SOURCE_DIM};

pub const PATCH_HEIGHT: usize = 110;
pub const PATCH_WIDTH: usize = 180;
/// Inclusive ranges the patch's top-left corner is drawn from.
pub const PATCH_TOP_RANGE: (usize, usize) = (160, 200);
pub const PATCH_LEFT_RANGE: (usize, usize) = (150, 200);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthParams {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 2 {
            return Err(Error::invalid(
                "n_patients",
                "need at least 2 patients so both classes are present",
            ));
        }
        if self.slices_per_patient == 0 {
            return Err(Error::invalid("slices_per_patient", "must be at least 1"));
        }
        Ok(())
    }
}

/// Rectangle `(top, left, height, width)` of a planted patch.
pub type PatchRect = (usize, usize, usize, usize);

fn patient_id(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(3);
    format!("P{index:0width$}")
}

/// Even-indexed patients are COVID, odd-indexed are non-COVID.
pub fn synthetic_label(index: usize) -> PatientLabel {
    if index % 2 == 0 {
        PatientLabel::Covid
    } else {
        PatientLabel::NonCovid
    }
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Patch rectangle for a COVID patient, a pure function of seed and index.
pub fn patch_rect(seed: u64, index: usize) -> PatchRect {
    let mut rng = patient_rng(seed, index);
    let top = rng.random_range(PATCH_TOP_RANGE.0..=PATCH_TOP_RANGE.1);
    let left = rng.random_range(PATCH_LEFT_RANGE.0..=PATCH_LEFT_RANGE.1);
    (top, left, PATCH_HEIGHT, PATCH_WIDTH)
}

fn inside_ellipse(r: f64, c: f64, cr: f64, cc: f64, rr: f64, rc: f64) -> bool {
    let dr = (r - cr) / rr;
    let dc = (c - cc) / rc;
    dr * dr + dc * dc <= 1.0
}

/// Renders one slice. `position` in [0, 1] runs from the top of the stack to
/// the bottom and shrinks the lungs toward either end.
fn render_slice(rng: &mut ChaCha8Rng, position: f64, patch: Option<PatchRect>) -> GrayImage {
    let n = SOURCE_DIM;
    let lung_scale = 0.55 + 0.45 * (std::f64::consts::PI * position).sin();
    let mut img: GrayImage = ImageBuffer::new(n as u32, n as u32);
    let mut noise = 0u32;
    for r in 0..n {
        for c in 0..n {
            if (r * n + c) % 4 == 0 {
                noise = rng.random();
            }
            let jitter = ((noise >> (8 * (c % 4))) & 0xff) as i32 % 25 - 12;
            let (rf, cf) = (r as f64, c as f64);
            let base: i32 = if !inside_ellipse(rf, cf, 256.0, 256.0, 200.0, 235.0) {
                0
            } else if inside_ellipse(rf, cf, 256.0, 176.0, 120.0 * lung_scale, 62.0 * lung_scale)
                || inside_ellipse(rf, cf, 256.0, 336.0, 120.0 * lung_scale, 62.0 * lung_scale)
            {
                40
            } else {
                110
            };
            let mut value = if base == 0 { 0 } else { base + jitter };
            if let Some((top, left, h, w)) = patch {
                if r >= top && r < top + h && c >= left && c < left + w {
                    // ground-glass style texture: bright blotches on a raised floor
                    let blotch = ((r / 6 + c / 9) % 3) as i32 * 20;
                    value = 170 + blotch + jitter * 2;
                }
            }
            img.put_pixel(c as u32, r as u32, Luma([value.clamp(0, 255) as u8]));
        }
    }
    img
}

fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    Ok(bytes)
}

/// Writes `<out>/<patient_id>/slice_<i>.png` for every patient plus
/// `<out>/manifest.csv`, and returns the manifest.
pub fn generate_synthetic_dataset(params: &SynthParams, out_dir: &Path) -> Result<Manifest> {
    params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let central = SelectionPolicy::default().kept_range(params.slices_per_patient);

    let entries = (0..params.n_patients)
        .into_par_iter()
        .map(|index| {
            let id = patient_id(index, params.n_patients);
            let label = synthetic_label(index);
            let patch = (label == PatientLabel::Covid).then(|| patch_rect(params.seed, index));
            let dir = out_dir.join(&id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            // stream 0 of this rng already fed patch_rect; slices use a disjoint word position
            let mut rng = patient_rng(params.seed, index);
            rng.set_word_pos(1 << 20);
            for s in 0..params.slices_per_patient {
                let position = if params.slices_per_patient > 1 {
                    s as f64 / (params.slices_per_patient - 1) as f64
                } else {
                    0.5
                };
                let slice_patch = patch.filter(|_| central.contains(&s));
                let img = render_slice(&mut rng, position, slice_patch);
                write_atomic(&dir.join(format!("slice_{s}.png")), &encode_png(&img)?)?;
            }
            log::info!("stage=synth patient={id} label={label} slices={}", params.slices_per_patient);
            Ok(ManifestEntry {
                patient_id: id.clone(),
                label: Some(label),
                path: PathBuf::from(id),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest::from_entries(entries)?;
    write_atomic(&out_dir.join("manifest.csv"), manifest.to_csv().as_bytes())?;
    Ok(manifest)
}
