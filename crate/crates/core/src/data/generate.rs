use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, Sample, NUM_GRADES};
use crate::error::{Error, Result};
use crate::frl::upsample_bilinear;
use crate::mca::{BiomarkerPanel, Codel, Idh};
use crate::numerics::Tensor;

/// Parameters of the planted-region generator.
///
/// Probability tables are indexed by grade (II, III, IV); each row is a
/// distribution over the biomarker's categories. CNV rows cover
/// `-2, -1, 0, 1, 2` and apply to each of the four genes independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub rois_per_patient: usize,
    pub image_size: usize,
    /// Amplitude of the smooth background texture.
    pub texture_amplitude: f64,
    /// Per-pixel, per-channel uniform noise amplitude.
    pub pixel_noise: f64,
    /// Small dark nuclei scattered over every image (not diagnostic).
    pub nuclei: usize,
    pub blob_radius: [f64; 2],
    pub streak_count: [usize; 2],
    pub streak_length: [f64; 2],
    pub streak_width: f64,
    /// Opacity of planted structures, in `(0, 1]`.
    pub structure_alpha: f64,
    /// Strength in `[0, 1]` of biomarker-linked nuclear morphology: perinuclear
    /// halos with 1p/19q codeletion, paler nuclei with IDH mutation, and extra
    /// nuclei per altered CNV gene. Zero makes images independent of the panel.
    pub biomarker_morphology: f64,
    pub grade_probs: [f64; NUM_GRADES],
    pub idh: [[f64; 2]; NUM_GRADES],
    pub codel: [[f64; 2]; NUM_GRADES],
    pub cnv: [[f64; 5]; NUM_GRADES],
    pub seed: u64,
}

fn cnv_row(nonzero: f64) -> [f64; 5] {
    let q = nonzero / 4.0;
    [q, q, 1.0 - nonzero, q, q]
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 120,
            rois_per_patient: 2,
            image_size: 64,
            texture_amplitude: 0.08,
            pixel_noise: 0.03,
            nuclei: 12,
            blob_radius: [7.0, 11.0],
            streak_count: [2, 3],
            streak_length: [18.0, 34.0],
            streak_width: 3.0,
            structure_alpha: 0.85,
            biomarker_morphology: 0.0,
            grade_probs: [1.0 / 3.0; NUM_GRADES],
            idh: [[0.2, 0.8], [0.4, 0.6], [0.9, 0.1]],
            codel: [[0.5, 0.5], [0.7, 0.3], [0.95, 0.05]],
            cnv: [cnv_row(0.1), cnv_row(0.3), cnv_row(0.6)],
            seed: 0,
        }
    }
}

fn check_dist(name: &str, row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("`{name}` row {row:?} is not a probability distribution")));
    }
    Ok(())
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
        return Err(Error::Config(format!("`{name}` range {r:?} must satisfy 0 < min <= max")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.rois_per_patient == 0 {
            return Err(Error::Config("need at least one patient and one ROI per patient".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is below 16", self.image_size)));
        }
        for (name, v) in [
            ("texture_amplitude", self.texture_amplitude),
            ("pixel_noise", self.pixel_noise),
            ("biomarker_morphology", self.biomarker_morphology),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`{name}` = {v} is outside [0, 1]")));
            }
        }
        if !(self.structure_alpha > 0.0 && self.structure_alpha <= 1.0) {
            return Err(Error::Config(format!("`structure_alpha` = {} is outside (0, 1]", self.structure_alpha)));
        }
        check_range("blob_radius", self.blob_radius)?;
        check_range("streak_length", self.streak_length)?;
        check_range("streak_width", [self.streak_width; 2])?;
        let [lo, hi] = self.streak_count;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("`streak_count` range {:?} must satisfy 0 < min <= max", self.streak_count)));
        }
        check_dist("grade_probs", &self.grade_probs)?;
        for g in 0..NUM_GRADES {
            check_dist("idh", &self.idh[g])?;
            check_dist("codel", &self.codel[g])?;
            check_dist("cnv", &self.cnv[g])?;
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.n_patients * self.rois_per_patient
    }

    /// Draws a biomarker panel for a patient of the given grade.
    pub fn draw_panel(&self, grade: usize, rng: &mut impl Rng) -> BiomarkerPanel {
        let pick = |row: &[f64], rng: &mut dyn rand::RngCore| WeightedIndex::new(row).expect("validated").sample(rng);
        let idh = [Idh::Wildtype, Idh::Mutant][pick(&self.idh[grade], rng)];
        let codel = [Codel::Intact, Codel::Codeleted][pick(&self.codel[grade], rng)];
        let cnv = std::array::from_fn(|_| pick(&self.cnv[grade], rng) as i8 - 2);
        BiomarkerPanel::new(idh, codel, cnv).expect("codes within domain")
    }
}

/// Independent stream for one patient (`roi == None`) or one of its ROIs.
fn stream(seed: u64, patient: usize, roi: Option<usize>, rois: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = match roi {
        None => patient as u64,
        Some(r) => (1 << 40) + (patient * rois + r) as u64,
    };
    rng.set_stream(id);
    rng
}

/// All samples, patient-major. Each sample has its own random stream, so
/// generating any subset reproduces the same samples.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.num_samples());
    for p in 0..config.n_patients {
        for r in 0..config.rois_per_patient {
            out.push(generate_sample(config, p, r)?);
        }
    }
    Ok(out)
}

pub fn generate_sample(config: &GeneratorConfig, patient: usize, roi: usize) -> Result<Sample> {
    config.validate()?;
    let mut prng = stream(config.seed, patient, None, config.rois_per_patient);
    let grade = WeightedIndex::new(config.grade_probs).expect("validated").sample(&mut prng);
    let panel = config.draw_panel(grade, &mut prng);

    let mut rng = stream(config.seed, patient, Some(roi), config.rois_per_patient);
    // Biomarker-linked extra nuclei use their own stream so the rest of the
    // image, including the planted structures, does not depend on them.
    let mut extra = rng.clone();
    extra.set_stream(rng.get_stream() + (1 << 41));
    let mut canvas = Canvas::background(config, &panel, &mut rng);
    let altered = panel.cnv().iter().filter(|&&v| v != 0).count();
    let more = (config.biomarker_morphology * (3 * altered * config.nuclei) as f64 / 4.0).round() as usize;
    canvas.nuclei(config, &panel, more, &mut extra);
    let (blob, vessels) = match grade {
        0 => (false, false),
        1 => {
            let b = rng.random_bool(0.5);
            (b, !b)
        }
        _ => (true, true),
    };
    if blob {
        canvas.necrosis(config, &mut rng);
    }
    if vessels {
        canvas.microvessels(config, &mut rng);
    }
    let s = config.image_size;
    let image = Tensor::new(&[s, s, 3], canvas.rgb.iter().map(|&v| quantize(v as f32)).collect())?;
    let digits = config.n_patients.saturating_sub(1).to_string().len().max(3);
    Ok(Sample {
        id: format!("p{patient:0digits$}_r{roi}"),
        patient_id: format!("p{patient:0digits$}"),
        grade,
        panel: Some(panel),
        image,
        focus_mask: Some(canvas.mask),
    })
}

const TISSUE: [f64; 3] = [0.86, 0.64, 0.78];
const NUCLEUS: [f64; 3] = [0.42, 0.28, 0.58];
const HALO: [f64; 3] = [0.97, 0.94, 0.96];
const NECROSIS: [f64; 3] = [0.30, 0.16, 0.28];
const VESSEL: [f64; 3] = [0.96, 0.32, 0.34];

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
    mask: Vec<bool>,
}

impl Canvas {
    fn background(c: &GeneratorConfig, panel: &BiomarkerPanel, rng: &mut ChaCha8Rng) -> Self {
        let s = c.image_size;
        let mut lum = vec![0.0; s * s];
        // Two octaves of bilinearly smoothed noise.
        for (cells, weight) in [(s / 8 + 1, 1.0), (s / 4 + 1, 0.5)] {
            let coarse: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fine = upsample_bilinear(&coarse, cells, cells, s, s);
            lum.iter_mut().zip(fine).for_each(|(l, f)| *l += weight * c.texture_amplitude * f);
        }
        let mut rgb = Vec::with_capacity(s * s * 3);
        for l in &lum {
            for base in TISSUE {
                rgb.push(base + l + c.pixel_noise * rng.random_range(-1.0..1.0));
            }
        }
        let mut canvas = Self {
            size: s,
            rgb,
            mask: vec![false; s * s],
        };
        canvas.nuclei(c, panel, c.nuclei, rng);
        canvas
    }

    /// Blends `color` into every pixel (center coordinates) where `inside`.
    fn paint(&mut self, color: [f64; 3], alpha: f64, planted: bool, inside: impl Fn(f64, f64) -> bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    let i = y * self.size + x;
                    for (ch, &col) in color.iter().enumerate() {
                        let v = &mut self.rgb[i * 3 + ch];
                        *v = (1.0 - alpha) * *v + alpha * col;
                    }
                    self.mask[i] |= planted;
                }
            }
        }
    }

    /// Paints `count` nuclei styled by the panel: paler with IDH mutation and
    /// haloed with 1p/19q codeletion, scaled by `biomarker_morphology`.
    fn nuclei(&mut self, c: &GeneratorConfig, panel: &BiomarkerPanel, count: usize, rng: &mut ChaCha8Rng) {
        let (s, m) = (self.size as f64, c.biomarker_morphology);
        let alpha = if panel.idh() == Idh::Mutant { 0.8 * (1.0 - 0.5 * m) } else { 0.8 };
        let halo = if panel.codel() == Codel::Codeleted { m } else { 0.0 };
        for _ in 0..count {
            let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let r = rng.random_range(1.2..2.2);
            if halo > 0.0 {
                let rh = r + 1.5;
                self.paint(HALO, 0.9 * halo, false, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= rh * rh);
            }
            self.paint(NUCLEUS, alpha, false, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
        }
    }

    fn necrosis(&mut self, c: &GeneratorConfig, rng: &mut ChaCha8Rng) {
        let s = self.size as f64;
        let [lo, hi] = c.blob_radius;
        let (ry, rx) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let margin = hi.min(s / 2.0 - 1.0);
        let cy = rng.random_range(margin..=s - margin);
        let cx = rng.random_range(margin..=s - margin);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        self.paint(NECROSIS, c.structure_alpha, true, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
        });
    }

    fn microvessels(&mut self, c: &GeneratorConfig, rng: &mut ChaCha8Rng) {
        let s = self.size as f64;
        let [lo, hi] = c.streak_count;
        let half = c.streak_width / 2.0;
        for _ in 0..rng.random_range(lo..=hi) {
            let len = rng.random_range(c.streak_length[0]..=c.streak_length[1]).min(s - 4.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (theta.sin() * len, theta.cos() * len);
            // Keep both endpoints inside the image.
            let y0 = rng.random_range((2.0f64).max(2.0 - dy)..=(s - 2.0).min(s - 2.0 - dy));
            let x0 = rng.random_range((2.0f64).max(2.0 - dx)..=(s - 2.0).min(s - 2.0 - dx));
            self.paint(VESSEL, c.structure_alpha, true, |y, x| {
                let t = (((y - y0) * dy + (x - x0) * dx) / (len * len)).clamp(0.0, 1.0);
                let (py, px) = (y0 + t * dy, x0 + t * dx);
                (y - py).powi(2) + (x - px).powi(2) <= half * half
            });
        }
    }
}
