//! Signal data model: records, paired windows, deterministic splits, the
//! synthetic paired-waveform generator, and manifest-driven file loading.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Window length used throughout the pipeline.
pub const WINDOW_LEN: usize = 300;
/// Sample rate of the source recordings.
pub const SAMPLE_RATE_HZ: u32 = 125;
/// Minimum record duration admitted to the pipeline, in seconds.
pub const MIN_DURATION_S: f64 = 8.0 * 60.0;
/// Per-subject training span for the sample-wise protocol, in seconds.
pub const TRAIN_SPAN_S: f64 = 6.4 * 60.0;
/// Per-subject test span following the training span, in seconds.
pub const TEST_SPAN_S: f64 = 1.6 * 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Ecg,
    Ppg,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Ecg => "ecg",
            Modality::Ppg => "ppg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ecg" => Ok(Modality::Ecg),
            "ppg" => Ok(Modality::Ppg),
            other => Err(Error::InvalidData(format!("unknown modality '{other}'"))),
        }
    }
}

/// One subject's raw single-channel time series.
#[derive(Clone, Debug)]
pub struct SignalRecord {
    pub subject_id: String,
    pub modality: Modality,
    pub sample_rate_hz: u32,
    pub samples: Vec<f64>,
    pub record_id: String,
}

impl SignalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::InvalidData(format!(
                "record {}: sample rate must be positive",
                self.record_id
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::InvalidData(format!(
                "record {}: empty sample sequence",
                self.record_id
            )));
        }
        if !self.samples.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "record {}: non-finite sample values",
                self.record_id
            )));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn meets_min_duration(&self) -> bool {
        self.samples.len() >= (MIN_DURATION_S * self.sample_rate_hz as f64) as usize
    }
}

/// Time-aligned pair of standardized windows sharing a subject.
#[derive(Clone, Debug)]
pub struct PairedSegment {
    pub subject_id: String,
    pub ecg: Vec<f64>,
    pub ppg: Vec<f64>,
    pub segment_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    SampleWise,
    SubjectWise,
}

impl SplitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::SampleWise => "sample-wise",
            SplitMode::SubjectWise => "subject-wise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sample-wise" => Ok(SplitMode::SampleWise),
            "subject-wise" => Ok(SplitMode::SubjectWise),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected sample-wise | subject-wise)"
            ))),
        }
    }
}

/// Train/test partition with a contiguous class index over train subjects.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub mode: SplitMode,
    pub train: Vec<PairedSegment>,
    pub test: Vec<PairedSegment>,
    /// subject_id -> contiguous class index over the train population.
    pub label_map: BTreeMap<String, usize>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    /// Class labels of the train segments, in order.
    pub fn train_labels(&self) -> Vec<usize> {
        self.train
            .iter()
            .map(|s| self.label_map[&s.subject_id])
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitParams {
    pub mode: SplitMode,
    pub seed: u64,
    /// Subject counts for the subject-wise partition; zero means the
    /// proportional default (272:69 scaled to the population).
    pub train_subjects: usize,
    pub test_subjects: usize,
}

impl SplitParams {
    pub fn sample_wise() -> Self {
        SplitParams {
            mode: SplitMode::SampleWise,
            seed: 0,
            train_subjects: 0,
            test_subjects: 0,
        }
    }

    pub fn subject_wise(seed: u64, train_subjects: usize, test_subjects: usize) -> Self {
        SplitParams {
            mode: SplitMode::SubjectWise,
            seed,
            train_subjects,
            test_subjects,
        }
    }
}

// ---------------------------------------------------------------------------
// Windowing and standardization
// ---------------------------------------------------------------------------

/// Cut a record into consecutive non-overlapping windows; the trailing
/// remainder shorter than one window is discarded.
pub fn segment_record(record: &SignalRecord, window_len: usize) -> Result<Vec<Vec<f64>>> {
    if window_len <= 1 {
        return Err(Error::InvalidArgument(format!(
            "window_len must be at least 2, got {window_len}"
        )));
    }
    record.validate()?;
    Ok(record
        .samples
        .chunks_exact(window_len)
        .map(|c| c.to_vec())
        .collect())
}

/// Per-window z-score with the population standard deviation. Constant
/// windows map to all zeros.
pub fn standardize_window(window: &[f64]) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::InvalidData("empty window".into()));
    }
    if !window.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidData("non-finite values in window".into()));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = window.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(vec![0.0; window.len()]);
    }
    let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(window.iter().map(|v| (v - mean) / std).collect())
}

/// Pair one subject's ECG and PPG records into standardized, time-aligned
/// windows. Length mismatches are resolved by truncating to the shorter
/// record so window k always covers the same sample range in both.
pub fn pair_records(ecg: &SignalRecord, ppg: &SignalRecord, window_len: usize) -> Result<Vec<PairedSegment>> {
    if ecg.subject_id != ppg.subject_id {
        return Err(Error::InvalidArgument(format!(
            "pairing records of different subjects: {} vs {}",
            ecg.subject_id, ppg.subject_id
        )));
    }
    ecg.validate()?;
    ppg.validate()?;
    let n = ecg.samples.len().min(ppg.samples.len());
    let truncated = |r: &SignalRecord| SignalRecord {
        samples: r.samples[..n].to_vec(),
        ..r.clone()
    };
    let ecg_windows = segment_record(&truncated(ecg), window_len)?;
    let ppg_windows = segment_record(&truncated(ppg), window_len)?;
    debug_assert_eq!(ecg_windows.len(), ppg_windows.len());
    ecg_windows
        .into_iter()
        .zip(ppg_windows)
        .enumerate()
        .map(|(k, (e, p))| {
            Ok(PairedSegment {
                subject_id: ecg.subject_id.clone(),
                ecg: standardize_window(&e)?,
                ppg: standardize_window(&p)?,
                segment_index: k,
            })
        })
        .collect()
}

/// Segments per subject covered by the first 6.4 minutes.
pub fn sample_wise_train_segments(sample_rate_hz: u32, window_len: usize) -> usize {
    (TRAIN_SPAN_S * sample_rate_hz as f64) as usize / window_len
}

/// Segments per subject covered by the following 1.6 minutes.
pub fn sample_wise_test_segments(sample_rate_hz: u32, window_len: usize) -> usize {
    ((TRAIN_SPAN_S + TEST_SPAN_S) * sample_rate_hz as f64) as usize / window_len
        - sample_wise_train_segments(sample_rate_hz, window_len)
}

/// Proportional subject-wise partition matching the 272:69 ratio.
pub fn proportional_subject_split(n_subjects: usize) -> (usize, usize) {
    let train = ((n_subjects as f64 * 272.0 / 341.0).round() as usize)
        .max(1)
        .min(n_subjects - 1);
    (train, n_subjects - train)
}

/// Build a deterministic train/test split from per-subject paired segments.
pub fn build_split(
    pairs_by_subject: &BTreeMap<String, Vec<PairedSegment>>,
    params: SplitParams,
) -> Result<DatasetSplit> {
    if pairs_by_subject.is_empty() {
        return Err(Error::InsufficientData("no subjects".into()));
    }
    match params.mode {
        SplitMode::SampleWise => {
            let train_n = sample_wise_train_segments(SAMPLE_RATE_HZ, WINDOW_LEN);
            let test_n = sample_wise_test_segments(SAMPLE_RATE_HZ, WINDOW_LEN);
            let need = train_n + test_n;
            let mut train = Vec::new();
            let mut test = Vec::new();
            let mut label_map = BTreeMap::new();
            for (subject, segments) in pairs_by_subject {
                if segments.len() < need {
                    return Err(Error::InsufficientData(format!(
                        "subject {subject} has {} segments, needs {need} for the sample-wise split",
                        segments.len()
                    )));
                }
                let class = label_map.len();
                label_map.insert(subject.clone(), class);
                for seg in segments {
                    if seg.segment_index < train_n {
                        train.push(seg.clone());
                    } else if seg.segment_index < need {
                        test.push(seg.clone());
                    }
                }
            }
            Ok(DatasetSplit {
                mode: SplitMode::SampleWise,
                train,
                test,
                label_map,
            })
        }
        SplitMode::SubjectWise => {
            let n = pairs_by_subject.len();
            let (want_train, want_test) = if params.train_subjects == 0 && params.test_subjects == 0
            {
                proportional_subject_split(n)
            } else {
                (params.train_subjects, params.test_subjects)
            };
            if want_train + want_test != n || want_train == 0 || want_test == 0 {
                return Err(Error::InsufficientData(format!(
                    "subject partition {want_train}+{want_test} does not cover the {n} subjects"
                )));
            }
            // Seeded shuffle over the sorted subject list.
            let mut subjects: Vec<&String> = pairs_by_subject.keys().collect();
            let mut rng = derive_rng(params.seed, "subject-split");
            for i in (1..subjects.len()).rev() {
                let j = rng.gen_range(0..=i);
                subjects.swap(i, j);
            }
            let train_subjects = &subjects[..want_train];
            let test_subjects = &subjects[want_train..];
            let mut label_map = BTreeMap::new();
            let mut sorted_train: Vec<&String> = train_subjects.to_vec();
            sorted_train.sort();
            for s in sorted_train {
                let class = label_map.len();
                label_map.insert(s.clone(), class);
            }
            let collect = |subs: &[&String]| -> Vec<PairedSegment> {
                let mut sorted: Vec<&String> = subs.to_vec();
                sorted.sort();
                sorted
                    .iter()
                    .flat_map(|s| pairs_by_subject[*s].iter().cloned())
                    .collect()
            };
            Ok(DatasetSplit {
                mode: SplitMode::SubjectWise,
                train: collect(train_subjects),
                test: collect(test_subjects),
                label_map,
            })
        }
    }
}

/// Group a flat list of segments by subject.
pub fn group_by_subject(segments: Vec<PairedSegment>) -> BTreeMap<String, Vec<PairedSegment>> {
    let mut map: BTreeMap<String, Vec<PairedSegment>> = BTreeMap::new();
    for seg in segments {
        map.entry(seg.subject_id.clone()).or_default().push(seg);
    }
    for segs in map.values_mut() {
        segs.sort_by_key(|s| s.segment_index);
    }
    map
}

// ---------------------------------------------------------------------------
// Synthetic paired-signal generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub heart_rate_range_bpm: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 20,
            duration_s: MIN_DURATION_S,
            seed: 1,
            noise_sigma: 0.05,
            heart_rate_range_bpm: (55.0, 75.0),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidArgument("n_subjects must be positive".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::InvalidArgument("duration_s must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
        }
        let (lo, hi) = self.heart_rate_range_bpm;
        if !(40.0..=180.0).contains(&lo) || !(40.0..=180.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "heart rate range ({lo}, {hi}) must lie within [40, 180]"
            )));
        }
        Ok(())
    }
}

/// Wrap-around Gaussian bump on the unit phase circle.
fn phase_bump(phase: f64, center: f64, width: f64, amp: f64) -> f64 {
    let mut d = (phase - center).abs();
    if d > 0.5 {
        d = 1.0 - d;
    }
    amp * (-d * d / (2.0 * width * width)).exp()
}

struct SubjectWaveforms {
    heart_rate_bpm: f64,
    /// (center, width, amplitude) per bump.
    ecg_bumps: Vec<(f64, f64, f64)>,
    ppg_bumps: Vec<(f64, f64, f64)>,
}

/// Per-subject morphology. ECG bump parameters vary widely between
/// subjects; PPG parameters vary much less, so the student modality is
/// intrinsically harder while sharing the exact beat schedule.
fn subject_waveforms(seed: u64, subject_idx: usize, hr_range: (f64, f64)) -> SubjectWaveforms {
    let mut rng = derive_rng(seed, &format!("subject-{subject_idx}"));
    let heart_rate_bpm = rng.gen_range(hr_range.0..=hr_range.1);
    // (base center, base width, base amp, center spread, width rel spread, amp rel spread)
    let ecg_proto: [(f64, f64, f64, f64, f64, f64); 5] = [
        (0.10, 0.030, 0.18, 0.030, 0.40, 0.60), // atrial bump
        (0.22, 0.010, -0.16, 0.015, 0.35, 0.55), // pre-spike dip
        (0.25, 0.012, 1.00, 0.010, 0.30, 0.25), // main spike
        (0.29, 0.011, -0.24, 0.015, 0.35, 0.55), // post-spike dip
        (0.45, 0.050, 0.32, 0.035, 0.40, 0.50), // recovery bump
    ];
    let ppg_proto: [(f64, f64, f64, f64, f64, f64); 2] = [
        (0.33, 0.085, 1.00, 0.012, 0.12, 0.06), // systolic rise
        (0.62, 0.110, 0.42, 0.015, 0.12, 0.18), // diastolic runoff
    ];
    let draw = |rng: &mut rand_chacha::ChaCha8Rng,
                proto: &[(f64, f64, f64, f64, f64, f64)]| {
        proto
            .iter()
            .map(|&(c, w, a, cs, ws, aspread)| {
                let c = c + rng.gen_range(-cs..=cs);
                let w = w * (1.0 + rng.gen_range(-ws..=ws));
                let a = a * (1.0 + rng.gen_range(-aspread..=aspread));
                (c.rem_euclid(1.0), w.max(1e-3), a)
            })
            .collect::<Vec<_>>()
    };
    let ecg_bumps = draw(&mut rng, &ecg_proto);
    let ppg_bumps = draw(&mut rng, &ppg_proto);
    SubjectWaveforms {
        heart_rate_bpm,
        ecg_bumps,
        ppg_bumps,
    }
}

fn render_waveform(
    bumps: &[(f64, f64, f64)],
    heart_rate_bpm: f64,
    n_samples: usize,
    sample_rate_hz: u32,
) -> Vec<f64> {
    let period_samples = 60.0 / heart_rate_bpm * sample_rate_hz as f64;
    (0..n_samples)
        .map(|i| {
            let phase = (i as f64 / period_samples).fract();
            bumps
                .iter()
                .map(|&(c, w, a)| phase_bump(phase, c, w, a))
                .sum()
        })
        .collect()
}

/// Generate one ECG and one PPG record per subject. Both modalities share
/// the subject's beat schedule, so the cross-modal mutual information is
/// real. Identical config and seed reproduce bit-identical output.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SignalRecord>> {
    config.validate()?;
    let n_samples = (config.duration_s * SAMPLE_RATE_HZ as f64).round() as usize;
    let mut records = Vec::with_capacity(config.n_subjects * 2);
    for subject_idx in 0..config.n_subjects {
        let wf = subject_waveforms(config.seed, subject_idx, config.heart_rate_range_bpm);
        let subject_id = format!("s{subject_idx:03}");
        let mut noise_rng = derive_rng(config.seed, &format!("noise-{subject_idx}"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut with_noise = |mut base: Vec<f64>| {
            if config.noise_sigma > 0.0 {
                for v in base.iter_mut() {
                    *v += config.noise_sigma * normal.sample(&mut noise_rng);
                }
            }
            base
        };
        let ecg = with_noise(render_waveform(
            &wf.ecg_bumps,
            wf.heart_rate_bpm,
            n_samples,
            SAMPLE_RATE_HZ,
        ));
        let ppg = with_noise(render_waveform(
            &wf.ppg_bumps,
            wf.heart_rate_bpm,
            n_samples,
            SAMPLE_RATE_HZ,
        ));
        records.push(SignalRecord {
            subject_id: subject_id.clone(),
            modality: Modality::Ecg,
            sample_rate_hz: SAMPLE_RATE_HZ,
            samples: ecg,
            record_id: format!("{subject_id}_ecg"),
        });
        records.push(SignalRecord {
            subject_id: format!("s{subject_idx:03}"),
            modality: Modality::Ppg,
            sample_rate_hz: SAMPLE_RATE_HZ,
            samples: ppg,
            record_id: format!("s{subject_idx:03}_ppg"),
        });
    }
    Ok(records)
}

/// Beat period in samples for a synthetic subject; exposed for tests that
/// verify the shared beat schedule.
pub fn synthetic_beat_period_samples(seed: u64, subject_idx: usize, hr_range: (f64, f64)) -> f64 {
    let wf = subject_waveforms(seed, subject_idx, hr_range);
    60.0 / wf.heart_rate_bpm * SAMPLE_RATE_HZ as f64
}

// ---------------------------------------------------------------------------
// Manifest and file formats
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub modality: Modality,
    pub sample_rate_hz: u32,
    pub path: PathBuf,
}

pub const MANIFEST_HEADER: &str = "subject_id\tmodality\tsample_rate_hz\tpath";

/// Parse the tab-separated manifest; paths are relative to the manifest's
/// directory.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::load(manifest_path.display().to_string(), "empty manifest"))?
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    if header.trim() != MANIFEST_HEADER {
        return Err(Error::load(
            manifest_path.display().to_string(),
            format!("unexpected header '{header}', want '{MANIFEST_HEADER}'"),
        ));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::load(
                manifest_path.display().to_string(),
                format!("line {}: expected 4 tab-separated columns", ln + 2),
            ));
        }
        entries.push(ManifestEntry {
            subject_id: cols[0].to_string(),
            modality: Modality::parse(cols[1])?,
            sample_rate_hz: cols[2].parse().map_err(|_| {
                Error::load(
                    manifest_path.display().to_string(),
                    format!("line {}: bad sample rate '{}'", ln + 2, cols[2]),
                )
            })?,
            path: base.join(cols[3]),
        });
    }
    Ok(entries)
}

fn read_signal_file(path: &Path) -> Result<Vec<f64>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "f32" => {
            let mut bytes = Vec::new();
            fs::File::open(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::load(
                    path.display().to_string(),
                    "file size is not a multiple of 4 bytes",
                ));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        }
        "txt" => {
            let file =
                fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut samples = Vec::new();
            for (ln, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
                let t = line.trim();
                if t.is_empty() {
                    continue;
                }
                samples.push(t.parse::<f64>().map_err(|_| {
                    Error::load(
                        path.display().to_string(),
                        format!("line {}: unreadable value '{t}'", ln + 1),
                    )
                })?);
            }
            Ok(samples)
        }
        other => Err(Error::load(
            path.display().to_string(),
            format!("unsupported extension '.{other}' (expected .f32 or .txt)"),
        )),
    }
}

/// Load every record named by a manifest. Order is stable by manifest
/// order; every subject must contribute both modalities.
pub fn load_records(manifest_path: &Path) -> Result<Vec<SignalRecord>> {
    let entries = read_manifest(manifest_path)?;
    let mut records = Vec::with_capacity(entries.len());
    for e in &entries {
        let samples = read_signal_file(&e.path)?;
        let record = SignalRecord {
            subject_id: e.subject_id.clone(),
            modality: e.modality,
            sample_rate_hz: e.sample_rate_hz,
            samples,
            record_id: format!("{}_{}", e.subject_id, e.modality.as_str()),
        };
        record.validate()?;
        records.push(record);
    }
    // Pairing requirement: each subject needs both modalities.
    let mut seen: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for r in &records {
        let e = seen.entry(r.subject_id.as_str()).or_insert((false, false));
        match r.modality {
            Modality::Ecg => e.0 = true,
            Modality::Ppg => e.1 = true,
        }
    }
    for (subject, (has_ecg, has_ppg)) in seen {
        if !has_ecg || !has_ppg {
            let missing = if has_ecg { "ppg" } else { "ecg" };
            return Err(Error::load(
                manifest_path.display().to_string(),
                format!("subject {subject} is missing its {missing} record"),
            ));
        }
    }
    Ok(records)
}

/// Standardized paired segments for every subject in a record list.
pub fn pair_all(records: &[SignalRecord], window_len: usize) -> Result<BTreeMap<String, Vec<PairedSegment>>> {
    let mut ecg: BTreeMap<&str, &SignalRecord> = BTreeMap::new();
    let mut ppg: BTreeMap<&str, &SignalRecord> = BTreeMap::new();
    for r in records {
        match r.modality {
            Modality::Ecg => ecg.insert(&r.subject_id, r),
            Modality::Ppg => ppg.insert(&r.subject_id, r),
        };
    }
    let mut out = BTreeMap::new();
    for (subject, e) in &ecg {
        let p = ppg.get(subject).ok_or_else(|| {
            Error::InvalidData(format!("subject {subject} has no ppg record"))
        })?;
        out.insert(subject.to_string(), pair_records(e, p, window_len)?);
    }
    Ok(out)
}

/// Write records plus a manifest into a dataset directory using the raw
/// 32-bit float format.
pub fn write_dataset(dir: &Path, records: &[SignalRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for r in records {
        let file_name = format!("{}.f32", r.record_id);
        let path = dir.join(&file_name);
        let mut bytes = Vec::with_capacity(r.samples.len() * 4);
        for v in &r.samples {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.subject_id,
            r.modality.as_str(),
            r.sample_rate_hz,
            file_name
        ));
    }
    let mut f = fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}
