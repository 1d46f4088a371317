//! Parametric synthetic trajectory generator and dataset partitioning.
//!
//! Lane geometry: the ego lane spans `[-1.75, +1.75]` m, the adjacent lanes
//! are centred at `+3.5` m (left) and `-3.5` m (right). Frames are sampled
//! at a nominal 10 Hz.
//!
//! * Drive-bys hold a constant lateral offset in their lane plus Gaussian
//!   noise while passing through longitudinally.
//! * Plain cut-ins follow one logistic lateral transition from an adjacent
//!   lane into the ego lane.
//! * Double cut-ins leave the ego lane and re-enter it (two logistic
//!   transitions, exactly two band crossings).
//! * Decelerative cut-ins are plain cut-ins whose relative velocity ramps
//!   below zero after the merge.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::DatasetPartition;
use crate::trajectory::{ClassLabel, CutInVariant, Frame, TrajId, Trajectory, TrajectoryStore};

pub const EGO_HALF_WIDTH: f64 = 1.75;
pub const LANE_CENTER: f64 = 3.5;
pub const SAMPLE_PERIOD: f64 = 0.1;

/// Bounds of the adjacent-lane band a drive-by must stay inside.
pub const ADJACENT_BAND: (f64, f64) = (2.5, 4.5);

/// Shape parameters for [`generate_trajectory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Inclusive frame-count range.
    pub min_len: usize,
    pub max_len: usize,
    /// Lateral noise of drive-bys (m).
    pub driveby_noise: f64,
    /// Maximum per-trajectory shift of a drive-by's lane offset (m).
    pub driveby_offset_jitter: f64,
    /// Lateral noise of cut-ins (m).
    pub cutin_noise: f64,
    /// Logistic steepness range, per frame.
    pub steepness: (f64, f64),
    /// Relative velocity noise (m/s).
    pub velocity_noise: f64,
    /// Relative mixture weights for Plain, Double and Decelerative cut-ins.
    pub variant_mix: [f64; 3],
    /// Share of drive-bys that drift toward the inner edge of their lane.
    #[serde(default)]
    pub drift_fraction: f64,
    /// Share of single-transition cut-ins whose lane change comes late.
    #[serde(default)]
    pub late_fraction: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            min_len: 30,
            max_len: 120,
            driveby_noise: 0.15,
            driveby_offset_jitter: 0.4,
            cutin_noise: 0.15,
            steepness: (0.15, 0.5),
            velocity_noise: 0.5,
            variant_mix: [0.6, 0.2, 0.2],
            drift_fraction: 0.6,
            late_fraction: 0.4,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("generator params: {m}")));
        if self.min_len < 8 || self.max_len < self.min_len {
            return fail("length range must satisfy 8 <= min_len <= max_len");
        }
        if !(0.0..=0.3).contains(&self.driveby_noise) || !(0.0..=0.3).contains(&self.cutin_noise) {
            return fail("lateral noise must lie in [0, 0.3] m");
        }
        if !(0.0..=0.5).contains(&self.driveby_offset_jitter) {
            return fail("drive-by offset jitter must lie in [0, 0.5] m");
        }
        let (lo, hi) = self.steepness;
        if !(lo > 0.0 && hi >= lo && hi <= 2.0) {
            return fail("steepness range must satisfy 0 < lo <= hi <= 2");
        }
        if !(0.0..=1.0).contains(&self.velocity_noise) {
            return fail("velocity noise must lie in [0, 1] m/s");
        }
        if !(0.0..=1.0).contains(&self.drift_fraction) || !(0.0..=1.0).contains(&self.late_fraction) {
            return fail("drift and late fractions must lie in [0, 1]");
        }
        if self.variant_mix.iter().any(|w| *w < 0.0 || !w.is_finite())
            || self.variant_mix.iter().sum::<f64>() <= 0.0
        {
            return fail("variant mixture weights must be nonnegative with a positive sum");
        }
        Ok(())
    }

    fn sample_variant(&self, rng: &mut impl Rng) -> CutInVariant {
        let total: f64 = self.variant_mix.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (w, v) in self.variant_mix.iter().zip([
            CutInVariant::Plain,
            CutInVariant::Double,
            CutInVariant::Decelerative,
        ]) {
            if u < *w {
                return v;
            }
            u -= w;
        }
        CutInVariant::Plain
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn in_ego_band(lat: f64) -> bool {
    lat.abs() <= EGO_HALF_WIDTH
}

/// Number of times the lateral position enters or leaves the ego-lane band.
pub fn band_crossings(frames: &[Frame]) -> usize {
    frames
        .windows(2)
        .filter(|w| in_ego_band(w[0][0]) != in_ego_band(w[1][0]))
        .count()
}

/// Generates one trajectory of the given class. For cut-ins, `variant`
/// selects the shape; it is ignored for drive-bys.
pub fn generate_trajectory(
    id: TrajId,
    class: ClassLabel,
    variant: Option<CutInVariant>,
    params: &GeneratorParams,
    rng: &mut impl Rng,
) -> Trajectory {
    let len = rng.random_range(params.min_len..=params.max_len);
    let (frames, variant) = match class {
        ClassLabel::LeftDriveBy => (drive_by(len, 1.0, params, rng), None),
        ClassLabel::RightDriveBy => (drive_by(len, -1.0, params, rng), None),
        ClassLabel::CutIn => {
            let v = variant.unwrap_or(CutInVariant::Plain);
            (cut_in(len, v, params, rng), Some(v))
        }
    };
    Trajectory {
        id,
        frames,
        label: Some(class),
        variant,
    }
}

fn drive_by(len: usize, side: f64, p: &GeneratorParams, rng: &mut impl Rng) -> Vec<Frame> {
    let lat_noise = Normal::new(0.0, p.driveby_noise.max(1e-12)).unwrap();
    let vel_noise = Normal::new(0.0, p.velocity_noise.max(1e-12)).unwrap();
    let center = side * (LANE_CENTER + rng.random_range(-p.driveby_offset_jitter..=p.driveby_offset_jitter));
    let speed = rng.random_range(3.0..8.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let duration = len as f64 * SAMPLE_PERIOD;
    let lon0 = -speed * duration / 2.0 + rng.random_range(-5.0..5.0);
    let (lo, hi) = ADJACENT_BAND;
    let (lo, hi) = if side > 0.0 { (lo, hi) } else { (-hi, -lo) };
    let n = len as f64;
    // Drifters slide toward the ego lane and stop just short of the band edge.
    let drift = (p.drift_fraction > 0.0 && rng.random_bool(p.drift_fraction)).then(|| {
        let mid = rng.random_range(0.4 * n..0.8 * n);
        let k = rng.random_range(p.steepness.0..=p.steepness.1);
        let depth = side * ADJACENT_BAND.0 - center + side * rng.random_range(0.05..0.3);
        (mid, k, depth)
    });
    (0..len)
        .map(|t| {
            let shift = drift.map_or(0.0, |(mid, k, depth)| depth * logistic(k * (t as f64 - mid)));
            let lat = (center + shift + lat_noise.sample(rng)).clamp(lo, hi);
            let lon = lon0 + speed * t as f64 * SAMPLE_PERIOD;
            [lat, lon, speed + vel_noise.sample(rng)]
        })
        .collect()
}

fn cut_in(len: usize, variant: CutInVariant, p: &GeneratorParams, rng: &mut impl Rng) -> Vec<Frame> {
    let lat_noise = Normal::new(0.0, p.cutin_noise.max(1e-12)).unwrap();
    let vel_noise = Normal::new(0.0, p.velocity_noise.max(1e-12)).unwrap();
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let n = len as f64;
    loop {
        let (lo, hi) = p.steepness;
        let lateral: Vec<f64> = match variant {
            CutInVariant::Plain | CutInVariant::Decelerative => {
                let late = p.late_fraction > 0.0 && rng.random_bool(p.late_fraction);
                let mid = if late {
                    rng.random_range(0.7 * n..0.82 * n)
                } else {
                    rng.random_range(0.3 * n..0.55 * n)
                };
                let k = rng.random_range(lo..=hi).max(8.0 / (n - mid));
                (0..len)
                    .map(|t| side * LANE_CENTER * (1.0 - logistic(k * (t as f64 - mid))))
                    .collect()
            }
            CutInVariant::Double => {
                // Out of the ego lane and back in.
                let out_mid = rng.random_range(0.2 * n..0.35 * n);
                let in_mid = rng.random_range(0.6 * n..0.75 * n);
                let k = rng.random_range(lo..=hi).max(10.0 / (in_mid - out_mid)).max(8.0 / (n - in_mid));
                (0..len)
                    .map(|t| {
                        let t = t as f64;
                        side * LANE_CENTER * (logistic(k * (t - out_mid)) - logistic(k * (t - in_mid)))
                    })
                    .collect()
            }
        };
        let lon0 = rng.random_range(0.0..25.0);
        let v0 = rng.random_range(-1.0..3.0);
        let velocity: Vec<f64> = match variant {
            CutInVariant::Decelerative => {
                let v_final = rng.random_range(-6.0..-2.0);
                let start = rng.random_range(0.5 * n..0.7 * n);
                (0..len)
                    .map(|t| {
                        let t = t as f64;
                        if t <= start {
                            v0
                        } else {
                            v0 + (v_final - v0) * (t - start) / (n - 1.0 - start)
                        }
                    })
                    .collect()
            }
            _ => vec![v0; len],
        };
        let mut lon = lon0;
        let frames: Vec<Frame> = (0..len)
            .map(|t| {
                let vel = velocity[t] + vel_noise.sample(rng);
                let f = [lateral[t] + lat_noise.sample(rng), lon, vel];
                lon += velocity[t] * SAMPLE_PERIOD;
                f
            })
            .collect();
        if cut_in_shape_ok(&frames, variant) {
            return frames;
        }
    }
}

fn cut_in_shape_ok(frames: &[Frame], variant: CutInVariant) -> bool {
    let last = frames[frames.len() - 1];
    let ends_in_lane = last[0].abs() <= 1.0;
    let crossings = band_crossings(frames);
    match variant {
        CutInVariant::Plain => ends_in_lane && crossings == 1,
        CutInVariant::Double => ends_in_lane && crossings == 2,
        CutInVariant::Decelerative => ends_in_lane && crossings == 1 && last[2] < 0.0,
    }
}

/// Cut-in share of a split. `33` denotes balanced classes (one third each).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alpha(pub u8);

impl Alpha {
    pub fn fraction(self) -> f64 {
        if self.0 == 33 {
            1.0 / 3.0
        } else {
            f64::from(self.0) / 100.0
        }
    }
}

/// Per-split sizes from the reference data tables.
pub fn reference_counts(alpha: Alpha) -> Result<(usize, usize, usize)> {
    match alpha.0 {
        33 => Ok((10, 2211, 615)),
        10 => Ok((10, 1769, 492)),
        5 => Ok((10, 1563, 435)),
        a => Err(Error::InfeasibleSpec(format!(
            "no reference split sizes for alpha = {a} (expected 33, 10 or 5)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub alpha: Alpha,
    pub annotated: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default)]
    pub params: GeneratorParams,
}

impl DatasetSpec {
    pub fn new(alpha: u8, counts: (usize, usize, usize), seed: u64) -> Self {
        DatasetSpec {
            alpha: Alpha(alpha),
            annotated: counts.0,
            unlabeled: counts.1,
            test: counts.2,
            seed,
            params: GeneratorParams::default(),
        }
    }

    /// Full reference-scale split sizes.
    pub fn full_scale(alpha: u8, seed: u64) -> Result<Self> {
        Ok(Self::new(alpha, reference_counts(Alpha(alpha))?, seed))
    }

    /// One tenth of the reference unlabeled and test sizes; the annotated set
    /// keeps its 10 points.
    pub fn desk_scale(alpha: u8, seed: u64) -> Result<Self> {
        let (a, u, t) = reference_counts(Alpha(alpha))?;
        let tenth = |n: usize| (n as f64 / 10.0).round() as usize;
        Ok(Self::new(alpha, (a, tenth(u), tenth(t)), seed))
    }

    pub fn total(&self) -> usize {
        self.annotated + self.unlabeled + self.test
    }
}

/// Class counts `[left, right, cut_in]` for a split of size `n` obeying the
/// equal drive-by rule. The cut-in count may move by one from the rounded
/// target to keep the drive-by remainder even.
pub fn split_counts(n: usize, alpha: Alpha) -> Result<[usize; 3]> {
    if alpha.0 > 100 {
        return Err(Error::InfeasibleSpec(format!("alpha = {} exceeds 100", alpha.0)));
    }
    let target = n as f64 * alpha.fraction();
    let rounded = target.round() as usize;
    let mut candidates = vec![rounded];
    if alpha.0 > 0 && alpha.0 < 100 {
        if rounded > 0 {
            candidates.push(rounded - 1);
        }
        candidates.push(rounded + 1);
    }
    let best = candidates
        .into_iter()
        .filter(|&c| c <= n && (n - c) % 2 == 0)
        .min_by(|a, b| {
            let da = (*a as f64 - target).abs();
            let db = (*b as f64 - target).abs();
            da.total_cmp(&db).then(a.cmp(b))
        });
    match best {
        Some(c) => Ok([(n - c) / 2, (n - c) / 2, c]),
        None => Err(Error::InfeasibleSpec(format!(
            "split of {n} trajectories at alpha = {} cannot hold equal left and right drive-bys",
            alpha.0
        ))),
    }
}

/// Annotated-set composition: as even as possible, extra points going to the
/// left then the right drive-by class (10 -> 4/3/3).
pub fn annotated_counts(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [base + usize::from(rem >= 1), base + usize::from(rem >= 2), base]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub store: TrajectoryStore,
    pub partition: DatasetPartition,
}

/// Generates the trajectory store and its three-way partition.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.params.validate()?;
    if spec.total() == 0 {
        return Err(Error::InfeasibleSpec("all split sizes are zero".into()));
    }
    if spec.annotated > 0 && spec.annotated < 3 {
        return Err(Error::InfeasibleSpec(format!(
            "annotated set of {} cannot hold one point per class",
            spec.annotated
        )));
    }
    let splits = [
        annotated_counts(spec.annotated),
        split_counts(spec.unlabeled, spec.alpha)?,
        split_counts(spec.test, spec.alpha)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id = 0u32;
    let mut store = TrajectoryStore::new();
    let mut members: [Vec<TrajId>; 3] = Default::default();
    for (split, counts) in splits.iter().enumerate() {
        let mut classes: Vec<ClassLabel> = ClassLabel::ALL
            .iter()
            .zip(counts)
            .flat_map(|(c, n)| std::iter::repeat_n(*c, *n))
            .collect();
        classes.shuffle(&mut rng);
        for class in classes {
            let id = TrajId(next_id);
            next_id += 1;
            let variant = (class == ClassLabel::CutIn).then(|| spec.params.sample_variant(&mut rng));
            store.insert(generate_trajectory(id, class, variant, &spec.params, &mut rng))?;
            members[split].push(id);
        }
    }
    let [annotated, unlabeled, test] = members;
    let partition = DatasetPartition::new(annotated, unlabeled, test)?;
    Ok(Dataset {
        spec: spec.clone(),
        store,
        partition,
    })
}

/// Generates `per_class` trajectories of each class, ids assigned class by
/// class. Cut-in variants follow the configured mixture.
pub fn generate_pool(per_class: usize, params: &GeneratorParams, seed: u64) -> Result<TrajectoryStore> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = TrajectoryStore::new();
    let mut id = 0u32;
    for class in ClassLabel::ALL {
        for _ in 0..per_class {
            let variant = (class == ClassLabel::CutIn).then(|| params.sample_variant(&mut rng));
            store.insert(generate_trajectory(TrajId(id), class, variant, params, &mut rng))?;
            id += 1;
        }
    }
    Ok(store)
}
