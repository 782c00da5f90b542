//! Synthetic affordance dataset: shapes, masks, part-aware instructions,
//! evaluation splits, manifests and instruction corruption.

pub mod catalog;
pub mod shapes;

use crate::backbone::PointCloud;
use crate::decoder::{mask_to_text, parse_mask};
use crate::error::{Error, Result};
use crate::io::KvRecord;
use crate::text::{normalize, InstructionRecord};
use catalog::{catalog, resolve, synonym_of, ClassSpec, SYNONYMS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use shapes::{generate_gt_mask, generate_shape, partial_crop, Jitter};
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    /// Training classes and words.
    Seen,
    /// Held-out object classes.
    Unseen,
    /// Training classes, instructions worded with unseen synonyms.
    Open,
    /// Training classes, clouds cropped to a half-space.
    Partial,
}

impl Split {
    pub const TEST: [Split; 4] = [Split::Seen, Split::Unseen, Split::Open, Split::Partial];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Open => "open",
            Split::Partial => "partial",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        [Split::Train, Split::Seen, Split::Unseen, Split::Open, Split::Partial]
            .into_iter()
            .find(|x| x.name() == s)
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

const RAW_TEMPLATES: [&str; 3] = [
    "What part of the {class} can I {aff}?",
    "Where should I {aff} this {class}?",
    "Which region of the {class} lets me {aff} it?",
];

fn raw_question(template: usize, class: &str, aff: &str) -> String {
    RAW_TEMPLATES[template % RAW_TEMPLATES.len()]
        .replace("{class}", class)
        .replace("{aff}", aff)
}

/// Fills the part-aware template. `affordance` may be a seen word or a
/// synonym; the id always refers to the seen affordance.
pub fn generate_instruction(
    class: &str,
    parts: &[&str],
    affordance: &str,
    target: &str,
    template: usize,
) -> Result<InstructionRecord> {
    if !parts.contains(&target) {
        return Err(Error::invalid(
            "generate_instruction",
            format!("part `{target}` is not a part of `{class}`"),
        ));
    }
    let affordance_id = resolve(affordance).ok_or_else(|| {
        Error::invalid("generate_instruction", format!("unknown affordance `{affordance}`"))
    })?;
    let structured = format!(
        "A {class} consists of {}. For {affordance}, I should focus on the {target}.",
        parts.join(", ")
    );
    let words = normalize(&structured);
    let part_index = words.len() - 1;
    debug_assert_eq!(words[part_index], target);
    Ok(InstructionRecord {
        raw: raw_question(template, class, affordance),
        structured,
        affordance_id,
        affordance_word: affordance.to_owned(),
        part_word: target.to_owned(),
        part_index,
    })
}

/// One point cloud with a query and its probabilistic answer.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceSample {
    pub id: String,
    pub split: Split,
    pub class: String,
    pub cloud: PointCloud,
    pub instruction: InstructionRecord,
    pub gt: Vec<f64>,
    /// Share of the source cloud kept by a partial-view crop.
    pub kept_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub points: usize,
    /// Number of catalog classes to use, from the front.
    pub classes: usize,
    /// Classes at the end of that list held out for the unseen split.
    pub holdout: usize,
    pub train_per_pair: usize,
    pub test_per_pair: usize,
    pub jitter: Jitter,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            points: 256,
            classes: 12,
            holdout: 3,
            train_per_pair: 8,
            test_per_pair: 2,
            jitter: Jitter::default(),
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for one stream of a seeded run.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

#[derive(Clone, Copy)]
struct Job {
    split: Split,
    class: usize,
    aff: usize,
    rep: usize,
}

fn make_sample(cfg: &DataConfig, classes: &[ClassSpec], job: Job) -> Result<AffordanceSample> {
    let spec = &classes[job.class];
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
        cfg.seed,
        &[job.split.code(), job.class as u64, job.aff as u64, job.rep as u64],
    ));
    let (seen_word, part_name) = spec.affordances[job.aff];
    let word = if job.split == Split::Open {
        synonym_of(seen_word).expect("every seen affordance has a synonym")
    } else {
        seen_word
    };
    let target = spec.part_index(part_name).expect("catalog part");
    let cloud = generate_shape(spec, cfg.points, cfg.jitter, &mut rng)?;
    let gt = generate_gt_mask(&cloud, target)?;
    let template = rng.gen_range(0..RAW_TEMPLATES.len());
    let instruction = generate_instruction(spec.name, &spec.part_names(), word, part_name, template)?;
    let (cloud, gt, kept_fraction) = if job.split == Split::Partial {
        let crop = partial_crop(&cloud, &gt, target, &mut rng)?;
        (crop.cloud, crop.mask, Some(crop.kept_fraction))
    } else {
        (cloud, gt, None)
    };
    Ok(AffordanceSample {
        id: format!("{}-{}-{}-{}", job.split.name(), spec.name, seen_word, job.rep),
        split: job.split,
        class: spec.name.to_owned(),
        cloud,
        instruction,
        gt,
        kept_fraction,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<AffordanceSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&AffordanceSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<AffordanceSample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}

/// Builds the training set and the four evaluation splits.
pub fn make_splits(cfg: &DataConfig) -> Result<Dataset> {
    let all = catalog();
    if cfg.classes == 0 || cfg.classes > all.len() {
        return Err(Error::invalid(
            "make_splits",
            format!("{} classes requested, catalog has {}", cfg.classes, all.len()),
        ));
    }
    if cfg.holdout >= cfg.classes {
        return Err(Error::invalid(
            "make_splits",
            format!("cannot hold out {} of {} classes", cfg.holdout, cfg.classes),
        ));
    }
    let classes = &all[..cfg.classes];
    let trained = cfg.classes - cfg.holdout;
    let mut jobs = Vec::new();
    let mut add = |split: Split, range: std::ops::Range<usize>, reps: usize| {
        for class in range {
            for aff in 0..classes[class].affordances.len() {
                for rep in 0..reps {
                    jobs.push(Job { split, class, aff, rep });
                }
            }
        }
    };
    add(Split::Train, 0..trained, cfg.train_per_pair);
    add(Split::Seen, 0..trained, cfg.test_per_pair);
    add(Split::Unseen, trained..cfg.classes, cfg.test_per_pair);
    add(Split::Open, 0..trained, cfg.test_per_pair);
    add(Split::Partial, 0..trained, cfg.test_per_pair);
    let samples = jobs
        .par_iter()
        .map(|&job| make_sample(cfg, classes, job))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl AffordanceSample {
    fn cloud_path(&self) -> String {
        format!("clouds/{}.pts", self.id)
    }

    fn mask_path(&self) -> String {
        format!("masks/{}.mask", self.id)
    }

    pub fn manifest_record(&self) -> KvRecord {
        let mut rec = KvRecord::default();
        rec.push("id", &self.id);
        rec.push("split", self.split.name());
        rec.push("class", &self.class);
        rec.push("cloud", self.cloud_path());
        rec.push("mask", self.mask_path());
        if let Some(k) = self.kept_fraction {
            rec.push("kept_fraction", format!("{k:?}"));
        }
        self.instruction.write_kv(&mut rec);
        rec
    }
}

/// One manifest entry before its cloud and mask files are read.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub class: String,
    pub cloud: String,
    pub mask: String,
    pub kept_fraction: Option<f64>,
    pub instruction: InstructionRecord,
}

fn safe_relative(path: &str, line: usize) -> Result<()> {
    let p = Path::new(path);
    if path.is_empty() || p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        return Err(Error::parse(line, format!("path `{path}` must be relative without `..`")));
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ln = i + 1;
        let rec = KvRecord::parse_line(line, ln)?;
        let split_name = rec.require("split")?;
        let split = Split::from_name(split_name)
            .ok_or_else(|| Error::parse(ln, format!("unknown split `{split_name}`")))?;
        let kept_fraction = match rec.get("kept_fraction") {
            Some(v) => Some(v.parse().map_err(|_| Error::parse(ln, format!("bad kept_fraction `{v}`")))?),
            None => None,
        };
        let e = ManifestEntry {
            id: rec.require("id")?.to_owned(),
            split,
            class: rec.require("class")?.to_owned(),
            cloud: rec.require("cloud")?.to_owned(),
            mask: rec.require("mask")?.to_owned(),
            kept_fraction,
            instruction: InstructionRecord::from_kv(&rec)?,
        };
        safe_relative(&e.cloud, ln)?;
        safe_relative(&e.mask, ln)?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("clouds"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for s in &data.samples {
        fs::write(dir.join(s.cloud_path()), s.cloud.to_text())?;
        fs::write(dir.join(s.mask_path()), mask_to_text(&s.gt))?;
        manifest.push_str(&s.manifest_record().to_line()?);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let samples = entries
        .into_iter()
        .map(|e| {
            let cloud = PointCloud::parse(&fs::read_to_string(dir.join(&e.cloud))?)?;
            let gt = parse_mask(&fs::read_to_string(dir.join(&e.mask))?)?;
            if gt.len() != cloud.len() {
                return Err(Error::invalid(
                    "load_dataset",
                    format!("{}: mask has {} values for {} points", e.id, gt.len(), cloud.len()),
                ));
            }
            Ok(AffordanceSample {
                id: e.id,
                split: e.split,
                class: e.class,
                cloud,
                instruction: e.instruction,
                gt,
                kept_fraction: e.kept_fraction,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionMode {
    /// Replace the affordance with another one of the same object; the
    /// instruction then focuses that affordance's part.
    Affordance,
    /// Keep the affordance, focus a different part.
    PartFocus,
}

impl CorruptionMode {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "affordance" => Some(Self::Affordance),
            "part-focus" | "part" => Some(Self::PartFocus),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Affordance => "affordance",
            Self::PartFocus => "part-focus",
        }
    }
}

fn template_of(raw: &str, class: &str, aff: &str) -> usize {
    (0..RAW_TEMPLATES.len())
        .find(|&t| raw_question(t, class, aff) == raw)
        .unwrap_or(0)
}

/// Alters `round(rate · eligible)` instructions; ground truth is untouched.
/// The records picked at a lower rate are a subset of those picked at a
/// higher rate for the same seed. Returns the altered positions too.
pub fn corrupt_instructions(
    samples: &[AffordanceSample],
    rate: f64,
    mode: CorruptionMode,
    seed: u64,
) -> Result<(Vec<AffordanceSample>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("corrupt_instructions", format!("rate {rate} outside [0, 1]")));
    }
    let cat = catalog();
    let spec_of = |s: &AffordanceSample| cat.iter().find(|c| c.name == s.class);
    let eligible: Vec<usize> = (0..samples.len())
        .filter(|&i| match spec_of(&samples[i]) {
            Some(c) => match mode {
                CorruptionMode::Affordance => c.affordances.len() >= 2,
                CorruptionMode::PartFocus => c.parts.len() >= 2,
            },
            None => false,
        })
        .collect();
    let mut order = eligible.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[0xc0ff]));
    order.shuffle(&mut rng);
    let count = (rate * eligible.len() as f64).round() as usize;
    let mut chosen: Vec<usize> = order[..count].to_vec();
    chosen.sort_unstable();

    let mut out = samples.to_vec();
    for &i in &chosen {
        let s = &samples[i];
        let spec = spec_of(s).expect("eligible");
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[0xa17e, i as u64]));
        let ins = &s.instruction;
        let is_synonym = SYNONYMS.iter().any(|(u, _)| *u == ins.affordance_word);
        let current = catalog::SEEN_AFFORDANCES[ins.affordance_id];
        let template = template_of(&ins.raw, &s.class, &ins.affordance_word);
        let (word, part) = match mode {
            CorruptionMode::Affordance => {
                let others: Vec<(&str, &str)> = spec.affordances.iter().copied().filter(|(a, _)| *a != current).collect();
                let moved: Vec<(&str, &str)> = others.iter().copied().filter(|(_, p)| *p != ins.part_word).collect();
                let pool = if moved.is_empty() { &others } else { &moved };
                let (a, p) = pool[rng.gen_range(0..pool.len())];
                let w = if is_synonym { synonym_of(a).unwrap_or(a) } else { a };
                (w.to_owned(), p)
            }
            CorruptionMode::PartFocus => {
                let others: Vec<&str> = spec.part_names().into_iter().filter(|p| *p != ins.part_word).collect();
                (ins.affordance_word.clone(), others[rng.gen_range(0..others.len())])
            }
        };
        out[i].instruction = generate_instruction(&s.class, &spec.part_names(), &word, part, template)?;
    }
    Ok((out, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> DataConfig {
        DataConfig {
            points: 64,
            train_per_pair: 2,
            test_per_pair: 1,
            ..DataConfig::default()
        }
    }

    #[test]
    fn instruction_template() {
        let r = generate_instruction("bag", &["body", "strap", "zipper"], "grasp", "strap", 0).unwrap();
        assert_eq!(r.structured, "A bag consists of body, strap, zipper. For grasp, I should focus on the strap.");
        assert_eq!(r.part_index, 14);
        assert_eq!(r.affordance_id, 0);
        let u = generate_instruction("monitor", &["screen", "stand", "base"], "demonstrate", "screen", 1).unwrap();
        assert_eq!(u.affordance_id, catalog::affordance_id("display").unwrap());
        assert!(u.structured.contains("demonstrate") && u.raw.contains("demonstrate"));
        assert!(generate_instruction("bag", &["body"], "grasp", "strap", 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_leak_free() {
        let d = make_splits(&small()).unwrap();
        let train_classes: HashSet<_> = d.split(Split::Train).iter().map(|s| s.class.clone()).collect();
        let unseen_classes: HashSet<_> = d.split(Split::Unseen).iter().map(|s| s.class.clone()).collect();
        assert!(!unseen_classes.is_empty());
        assert!(train_classes.is_disjoint(&unseen_classes));
        let synonyms: HashSet<&str> = SYNONYMS.iter().map(|(u, _)| *u).collect();
        for s in d.split(Split::Train) {
            let words: Vec<String> = normalize(&s.instruction.structured)
                .into_iter()
                .chain(normalize(&s.instruction.raw))
                .collect();
            assert!(words.iter().all(|w| !synonyms.contains(w.as_str())), "{}", s.id);
        }
        for s in d.split(Split::Open) {
            assert!(synonyms.contains(s.instruction.affordance_word.as_str()));
        }
        for s in d.split(Split::Partial) {
            assert!(s.kept_fraction.unwrap() >= shapes::MIN_KEEP_FRACTION);
        }
        let ids: HashSet<_> = d.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), d.samples.len());
        assert!(make_splits(&DataConfig { classes: 3, holdout: 3, ..small() }).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(make_splits(&small()).unwrap(), make_splits(&small()).unwrap());
    }

    #[test]
    fn dataset_roundtrips_through_files() {
        let d = make_splits(&DataConfig { classes: 4, holdout: 1, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn manifest_rejects_escaping_paths() {
        let d = make_splits(&DataConfig { classes: 2, holdout: 1, ..small() }).unwrap();
        let line = d.samples[0].manifest_record().to_line().unwrap();
        assert_eq!(parse_manifest(&line).unwrap().len(), 1);
        let bad = line.replace("cloud=clouds/", "cloud=../");
        assert!(parse_manifest(&bad).is_err());
    }

    #[test]
    fn corruption_counts_and_nesting() {
        let d = make_splits(&small()).unwrap();
        let open = d.split_owned(Split::Open);
        let (same, none) = corrupt_instructions(&open, 0.0, CorruptionMode::Affordance, 7).unwrap();
        assert!(none.is_empty());
        assert_eq!(same, open);
        let (c10, a10) = corrupt_instructions(&open, 0.1, CorruptionMode::Affordance, 7).unwrap();
        let (c20, a20) = corrupt_instructions(&open, 0.2, CorruptionMode::Affordance, 7).unwrap();
        assert_eq!(a10.len(), (0.1 * open.len() as f64).round() as usize);
        assert_eq!(a20.len(), (0.2 * open.len() as f64).round() as usize);
        assert!(a10.iter().all(|i| a20.contains(i)));
        for &i in &a20 {
            assert_ne!(c20[i].instruction.affordance_id, open[i].instruction.affordance_id);
            assert_eq!(c20[i].gt, open[i].gt);
            let w = &c20[i].instruction.affordance_word;
            assert!(SYNONYMS.iter().any(|(u, _)| u == w));
        }
        let changed = (0..open.len()).filter(|&i| c10[i] != open[i]).count();
        assert_eq!(changed, a10.len());
        let (_, all) = corrupt_instructions(&open, 1.0, CorruptionMode::PartFocus, 7).unwrap();
        assert_eq!(all.len(), open.len());
        assert!(corrupt_instructions(&open, 1.5, CorruptionMode::PartFocus, 7).is_err());

        let mut hundred = Vec::new();
        while hundred.len() < 100 {
            hundred.extend(open.iter().cloned());
        }
        hundred.truncate(100);
        let (_, a) = corrupt_instructions(&hundred, 0.2, CorruptionMode::Affordance, 1).unwrap();
        assert_eq!(a.len(), 20);
    }
}
