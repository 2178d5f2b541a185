use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SampleRecord, TaskData, TaskStream};

pub const IMAGE_SHAPE: (usize, usize, usize) = (3, 16, 16);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    /// 70/10/20 around 500 training samples.
    fn default() -> Self {
        Self { train: 500, val: 71, test: 143 }
    }
}

/// Appearance knobs of the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// Amplitude of the luminance-neutral background tint encoding the attribute.
    pub tint: f64,
    /// Relative per-sample jitter of the tint amplitude.
    pub tint_jitter: f64,
    /// Amplitude of the grayscale class pattern.
    pub pattern_contrast: f64,
    /// Std of independent per-pixel noise.
    pub pixel_noise: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self { tint: 0.08, tint_jitter: 0.8, pattern_contrast: 0.2, pixel_noise: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub num_tasks: usize,
    pub classes_per_task: Vec<usize>,
    pub num_groups: usize,
    /// Probability that a training/validation sample carries its class-aligned attribute.
    pub rho_train: f64,
    /// Same for the test split.
    pub rho_test: f64,
    #[serde(default)]
    pub samples_per_class: SplitSizes,
    pub seed: u64,
    #[serde(default)]
    pub render: RenderSpec,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            classes_per_task: vec![2, 2, 3],
            num_groups: 2,
            rho_train: 0.95,
            rho_test: 0.5,
            samples_per_class: SplitSizes::default(),
            seed: 0,
            render: RenderSpec::default(),
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if self.num_tasks == 0 {
            errs.push("num_tasks must be >= 1".to_string());
        }
        if self.classes_per_task.len() != self.num_tasks {
            errs.push(format!(
                "classes_per_task has {} entries for {} tasks",
                self.classes_per_task.len(),
                self.num_tasks
            ));
        }
        if self.classes_per_task.iter().any(|c| *c < 2) {
            errs.push("every task needs at least 2 classes".to_string());
        }
        if self.num_groups < 2 {
            errs.push("num_groups must be >= 2".to_string());
        }
        let lo = 1.0 / self.num_groups.max(1) as f64;
        for (name, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(rho >= lo - 1e-12 && rho <= 1.0) {
                errs.push(format!("{name} = {rho} outside [1/G, 1]"));
            }
        }
        let s = self.samples_per_class;
        for (name, n) in [("train", s.train), ("val", s.val), ("test", s.test)] {
            if n < self.num_groups {
                errs.push(format!("samples_per_class.{name} = {n} is smaller than the number of groups"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

/// Group that class `local_class` (index within its task) is correlated with.
pub fn aligned_group(local_class: usize, num_groups: usize) -> usize {
    local_class % num_groups
}

fn sample_attribute(rng: &mut ChaCha8Rng, aligned: usize, groups: usize, rho: f64) -> usize {
    if rng.gen::<f64>() < rho {
        aligned
    } else {
        let k = rng.gen_range(0..groups - 1);
        if k >= aligned {
            k + 1
        } else {
            k
        }
    }
}

fn render(rng: &mut ChaCha8Rng, class: usize, group: usize, groups: usize, r: &RenderSpec) -> Vec<f32> {
    let (c, h, w) = IMAGE_SHAPE;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let amp = r.tint * (1.0 + r.tint_jitter * normal.sample(rng)).max(0.0);
    let angle = 2.0 * PI * group as f64 / groups as f64;
    let tint = [angle.cos(), (angle - 2.0 * PI / 3.0).cos(), (angle + 2.0 * PI / 3.0).cos()];

    let orientation = (class % 4) as f64 * PI / 4.0;
    let freq = if (class / 4) % 2 == 0 { 0.25 } else { 0.15 };
    let phase = rng.gen_range(0.0..2.0 * PI);
    let patch = 10usize;
    let oy = rng.gen_range(1..=h - patch - 1);
    let ox = rng.gen_range(1..=w - patch - 1);
    let (ct, st) = (orientation.cos(), orientation.sin());

    let mut img = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = y >= oy && y < oy + patch && x >= ox && x < ox + patch;
            let lum = if inside {
                let (u, v) = ((x - ox) as f64, (y - oy) as f64);
                r.pattern_contrast * (2.0 * PI * freq * (u * ct + v * st) + phase).sin()
            } else {
                0.0
            };
            for (ch, t) in tint.iter().enumerate().take(c) {
                let v = 0.5 + amp * t + lum + r.pixel_noise * normal.sample(rng);
                img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Deterministic synthetic task stream. Classes are numbered consecutively across
/// tasks; class signal is an oriented grating, the attribute a background tint.
pub fn generate(spec: &BiasSpec) -> Result<TaskStream, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id = 0u64;
    let mut next_class = 0usize;
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for (t, &n_classes) in spec.classes_per_task.iter().enumerate() {
        let task_id = t as u32 + 1;
        let classes: Vec<usize> = (next_class..next_class + n_classes).collect();
        next_class += n_classes;
        let mut data = TaskData { task_id, classes: classes.clone(), train: vec![], val: vec![], test: vec![] };
        let sizes = spec.samples_per_class;
        for (count, rho, which) in [(sizes.train, spec.rho_train, 0), (sizes.val, spec.rho_train, 1), (sizes.test, spec.rho_test, 2)] {
            for (local, &class) in classes.iter().enumerate() {
                let aligned = aligned_group(local, spec.num_groups);
                for _ in 0..count {
                    let attribute = sample_attribute(&mut rng, aligned, spec.num_groups, rho);
                    let image = render(&mut rng, class, attribute, spec.num_groups, &spec.render);
                    let rec = SampleRecord { id: next_id, image, label: class, attribute, task_id };
                    next_id += 1;
                    match which {
                        0 => data.train.push(rec),
                        1 => data.val.push(rec),
                        _ => data.test.push(rec),
                    }
                }
            }
        }
        tasks.push(data);
    }
    Ok(TaskStream { input_shape: IMAGE_SHAPE, num_groups: spec.num_groups, tasks })
}
