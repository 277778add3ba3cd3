//! Synthetic multimodal cohort generation, preprocessing, splits and batches.
//!
//! The generator gives every patient latent condition clusters (one per
//! parent code group). Visit codes persist across visits with probability
//! `p_persist`, dormant codes from earlier visits relapse with probability
//! `p_relapse` (so part of the target is only visible to a model that reads
//! more than the current visit), and fresh codes come mostly from the active
//! clusters. Clusters can also emerge between visits: the emerging cluster's
//! codes appear in the next visit while the current visit's note already
//! previews them, so that part of the target is invisible to the code
//! stream but visible to the note stream. Notes mix tokens drawn from
//! per-code vocabulary blocks for the current visit, preview tokens for the
//! next visit, and noise. A configurable fraction of patients gets
//! pure-noise notes, which is what makes adaptive gating of the note stream
//! worth learning. Demographics are drawn per patient (admission and
//! discharge attributes biased by the patient's cluster set) with the age
//! bucket advancing across visits.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::Ontology;

/// Token id 0 pads notes; token id 1 is the unknown-word slot.
pub const PAD_TOKEN: usize = 0;
pub const UNK_TOKEN: usize = 1;

/// Number of demographic attributes per visit.
pub const DEMO_ATTRS: usize = 6;

/// Category counts per demographic attribute:
/// age bucket, gender, admission type, admission location, discharge
/// location, insurance.
pub const DEMO_CARDINALITIES: [usize; DEMO_ATTRS] = [73, 2, 3, 8, 16, 5];

/// Hard cap on codes per visit.
pub const MAX_CODES_PER_VISIT: usize = 39;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cohort line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Visit {
    pub codes: Vec<usize>,
    pub demo: [usize; DEMO_ATTRS],
    pub note: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub visits: Vec<Visit>,
}

/// Knobs for the synthetic generative process. Defaults are the desk-scale
/// configuration the acceptance runs use.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub vocab: usize,
    pub note_len_min: usize,
    pub note_len_max: usize,
    pub note_cap: usize,
    /// Probability that a code from the current visit recurs in the next.
    pub p_persist: f64,
    /// Probability that a dormant code (present at an earlier visit, absent
    /// from the current one) resurfaces in the next visit.
    pub p_relapse: f64,
    pub codes_mean: f64,
    pub codes_sd: f64,
    pub codes_min: usize,
    pub codes_max: usize,
    pub clusters_min: usize,
    pub clusters_max: usize,
    /// Probability that a new cluster emerges at each visit transition
    /// (until `clusters_max` are active). Emerging codes are previewed by
    /// the note one visit before they are coded.
    pub p_emerge: f64,
    /// Probability a fresh code is drawn from an active cluster.
    pub p_in_cluster: f64,
    /// Geometric continuation probability for visits beyond the second.
    pub p_visit_continue: f64,
    pub max_visits: usize,
    /// Fraction of patients whose notes are pure noise.
    pub noise_note_fraction: f64,
    /// Per-token probabilities for note composition.
    pub p_token_current: f64,
    pub p_token_next: f64,
    /// Tokens reserved per leaf code in the vocabulary.
    pub code_block: usize,
    /// Probability that admission attributes follow the first cluster.
    pub demo_cluster_bias: f64,
    /// Fraction of a cluster's codes a given patient can express. Each
    /// patient draws a per-cluster repertoire of this size; in-cluster
    /// draws come from it, so code history reveals which half of the
    /// category is active for this patient.
    pub repertoire_fraction: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            vocab: 2000,
            note_len_min: 9,
            note_len_max: 14,
            note_cap: 10_000,
            p_persist: 0.6,
            p_relapse: 0.3,
            codes_mean: 12.0,
            codes_sd: 2.5,
            codes_min: 4,
            codes_max: 20,
            clusters_min: 2,
            clusters_max: 4,
            p_emerge: 0.55,
            p_in_cluster: 0.8,
            p_visit_continue: 0.45,
            max_visits: 21,
            noise_note_fraction: 0.15,
            p_token_current: 0.3,
            p_token_next: 0.45,
            code_block: 8,
            demo_cluster_bias: 0.9,
            repertoire_fraction: 1.0,
        }
    }
}

impl GenParams {
    fn validate(&self, ont: &Ontology) -> Result<(), DataError> {
        let reserved = 2 + ont.leaves() * self.code_block;
        if self.vocab <= reserved {
            return Err(DataError::Config(format!(
                "vocab {} leaves no noise tokens after {} reserved (2 specials + {} leaves x {} block)",
                self.vocab,
                reserved,
                ont.leaves(),
                self.code_block
            )));
        }
        if self.clusters_max > ont.parents() || self.clusters_min == 0 {
            return Err(DataError::Config(format!(
                "cluster range {}..={} incompatible with {} parents",
                self.clusters_min,
                self.clusters_max,
                ont.parents()
            )));
        }
        if self.codes_max > MAX_CODES_PER_VISIT || self.codes_min == 0 {
            return Err(DataError::Config(format!(
                "codes per visit range {}..={} outside 1..={MAX_CODES_PER_VISIT}",
                self.codes_min, self.codes_max
            )));
        }
        if self.note_len_min == 0 || self.note_len_min > self.note_len_max {
            return Err(DataError::Config(format!(
                "note length range {}..={} invalid",
                self.note_len_min, self.note_len_max
            )));
        }
        Ok(())
    }

    fn noise_pool_start(&self, ont: &Ontology) -> usize {
        2 + ont.leaves() * self.code_block
    }

    fn code_token(&self, code: usize, rng: &mut ChaCha8Rng) -> usize {
        2 + code * self.code_block + rng.random_range(0..self.code_block)
    }
}

/// The ontology the desk-scale cohorts use: 120 leaves over 12 parents with
/// 10 children each.
pub fn default_ontology() -> Ontology {
    let mut edges = Vec::with_capacity(120);
    for leaf in 0..120 {
        edges.push((format!("D{leaf:03}"), format!("P{:02}", leaf / 10)));
    }
    Ontology::from_edges(&edges).expect("static edge list is well-formed")
}

fn patient_rng(seed: u64, patient: u64) -> ChaCha8Rng {
    // splitmix64 over (seed, patient index) gives independent streams
    let mut z = seed ^ patient.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Deterministic synthetic cohort; per-patient RNG streams derive from the
/// patient index, so the output is independent of generation order.
pub fn generate_cohort(
    seed: u64,
    n_patients: usize,
    ont: &Ontology,
    gp: &GenParams,
) -> Result<Vec<PatientRecord>, DataError> {
    if n_patients == 0 {
        return Err(DataError::Config("cohort of zero patients".into()));
    }
    gp.validate(ont)?;
    Ok((0..n_patients as u64)
        .map(|pid| generate_patient(seed, pid, ont, gp))
        .collect())
}

fn generate_patient(seed: u64, pid: u64, ont: &Ontology, gp: &GenParams) -> PatientRecord {
    let mut rng = patient_rng(seed, pid);

    let k = rng.random_range(gp.clusters_min..=gp.clusters_max);
    let mut clusters: Vec<usize> = Vec::with_capacity(k);
    while clusters.len() < k {
        let c = rng.random_range(0..ont.parents());
        if !clusters.contains(&c) {
            clusters.push(c);
        }
    }
    // per-cluster repertoire: the subset of the category this patient can express
    let repertoires: Vec<Vec<usize>> = clusters
        .iter()
        .map(|&c| {
            let kids = ont.children_of(c);
            let want = ((kids.len() as f64 * gp.repertoire_fraction).round() as usize)
                .clamp(1, kids.len());
            let mut picked: Vec<usize> = Vec::with_capacity(want);
            while picked.len() < want {
                let cand = kids[rng.random_range(0..kids.len())];
                if !picked.contains(&cand) {
                    picked.push(cand);
                }
            }
            picked.sort_unstable();
            picked
        })
        .collect();

    let mut n_visits = 2;
    while n_visits < gp.max_visits && rng.random_range(0.0..1.0) < gp.p_visit_continue {
        n_visits += 1;
    }

    let noisy_notes = rng.random_range(0.0..1.0) < gp.noise_note_fraction;

    // Cluster activation schedule: start with one cluster, the rest emerge
    // at later transitions. An emerging cluster's codes first appear in the
    // visit where it activates, but the preceding visit's note previews them.
    let mut active_after = vec![0usize; clusters.len()];
    for (i, slot) in active_after.iter_mut().enumerate().skip(1) {
        *slot = usize::MAX; // inactive unless an emergence event fires
        let _ = i;
    }
    {
        let mut next = 1;
        for t in 1..n_visits {
            if next < clusters.len() && rng.random_range(0.0..1.0) < gp.p_emerge {
                active_after[next] = t;
                next += 1;
            }
        }
    }
    let active_at = |t: usize, schedule: &[usize]| -> Vec<usize> {
        schedule
            .iter()
            .enumerate()
            .filter(|(_, &since)| since <= t)
            .map(|(i, _)| i)
            .collect()
    };

    // code sequence first, so notes can preview the next visit
    let mut code_seq: Vec<Vec<usize>> = Vec::with_capacity(n_visits);
    for t in 0..n_visits {
        let active = active_at(t, &active_after);
        let target = (gp.codes_mean + gp.codes_sd * std_normal(&mut rng)).round();
        let target = (target.max(gp.codes_min as f64) as usize).min(gp.codes_max);
        let mut codes: Vec<usize> = Vec::with_capacity(target);
        if t > 0 {
            for &c in &code_seq[t - 1] {
                if rng.random_range(0.0..1.0) < gp.p_persist && codes.len() < gp.codes_max {
                    codes.push(c);
                }
            }
            // dormant codes (seen before, absent now) may relapse
            let mut dormant: Vec<usize> = Vec::new();
            for earlier in &code_seq[..t - 1] {
                for &c in earlier {
                    if !code_seq[t - 1].contains(&c) && !dormant.contains(&c) {
                        dormant.push(c);
                    }
                }
            }
            for &c in &dormant {
                if rng.random_range(0.0..1.0) < gp.p_relapse
                    && !codes.contains(&c)
                    && codes.len() < gp.codes_max
                {
                    codes.push(c);
                }
            }
        }
        // a newly emerged cluster contributes several codes immediately
        if t > 0 {
            for (i, &since) in active_after.iter().enumerate() {
                if since == t {
                    let rep = &repertoires[i];
                    for _ in 0..5 {
                        let c = rep[rng.random_range(0..rep.len())];
                        if !codes.contains(&c) && codes.len() < gp.codes_max {
                            codes.push(c);
                        }
                    }
                }
            }
        }
        let mut guard = 0;
        while codes.len() < target && guard < 200 {
            guard += 1;
            let c = if rng.random_range(0.0..1.0) < gp.p_in_cluster {
                let which = rng.random_range(0..active.len());
                let rep = &repertoires[which];
                rep[rng.random_range(0..rep.len())]
            } else {
                rng.random_range(0..ont.leaves())
            };
            if !codes.contains(&c) {
                codes.push(c);
            }
        }
        if codes.is_empty() {
            codes.push(repertoires[0][0]);
        }
        codes.sort_unstable();
        code_seq.push(codes);
    }

    // Demographics: drawn per patient, only the age bucket advances. The
    // admission/discharge attributes lean toward the patient's cluster set
    // (including clusters that have not emerged yet), so the demo stream
    // carries forward-looking information the code stream lacks.
    let mut age = rng.random_range(20..60usize);
    let gender = rng.random_range(0..DEMO_CARDINALITIES[1]);
    let biased = |slot: usize, card: usize, rng: &mut ChaCha8Rng, bias: f64| -> usize {
        if slot < clusters.len() && rng.random_range(0.0..1.0) < bias {
            clusters[slot] % card
        } else {
            rng.random_range(0..card)
        }
    };
    let adm_type = biased(0, DEMO_CARDINALITIES[2], &mut rng, gp.demo_cluster_bias);
    let adm_loc = biased(1, DEMO_CARDINALITIES[3], &mut rng, gp.demo_cluster_bias);
    let dis_loc = biased(2, DEMO_CARDINALITIES[4], &mut rng, gp.demo_cluster_bias);
    let insurance = rng.random_range(0..DEMO_CARDINALITIES[5]);

    let noise_start = gp.noise_pool_start(ont);
    let mut visits = Vec::with_capacity(n_visits);
    for t in 0..n_visits {
        let len = rng.random_range(gp.note_len_min..=gp.note_len_max);
        let mut note = Vec::with_capacity(len);
        for _ in 0..len {
            let roll: f64 = rng.random_range(0.0..1.0);
            let token = if noisy_notes {
                rng.random_range(noise_start..gp.vocab)
            } else if roll < gp.p_token_current {
                let codes = &code_seq[t];
                gp.code_token(codes[rng.random_range(0..codes.len())], &mut rng)
            } else if roll < gp.p_token_current + gp.p_token_next && t + 1 < n_visits {
                let codes = &code_seq[t + 1];
                gp.code_token(codes[rng.random_range(0..codes.len())], &mut rng)
            } else {
                rng.random_range(noise_start..gp.vocab)
            };
            note.push(token);
        }

        visits.push(Visit {
            codes: code_seq[t].clone(),
            demo: [age, gender, adm_type, adm_loc, dis_loc, insurance],
            note,
        });
        if rng.random_range(0.0..1.0) < 0.3 {
            age = (age + 1).min(DEMO_CARDINALITIES[0] - 1);
        }
    }

    PatientRecord {
        patient_id: pid,
        visits,
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Selection and truncation rules applied before any training:
/// empty-note visits are removed first, then patients with fewer than two
/// remaining visits are dropped, visits beyond `max_visits` are cut, and
/// notes are capped at `note_cap` tokens.
pub fn preprocess(records: Vec<PatientRecord>, max_visits: usize, note_cap: usize) -> Vec<PatientRecord> {
    records
        .into_iter()
        .filter_map(|mut r| {
            r.visits.retain(|v| !v.note.is_empty());
            if r.visits.len() < 2 {
                return None;
            }
            r.visits.truncate(max_visits);
            for v in &mut r.visits {
                v.note.truncate(note_cap);
            }
            Some(r)
        })
        .collect()
}

/// Patient-level split with floor counts for train and validation and the
/// remainder as test (6812 patients at 0.8/0.1/0.1 gives 5449/681/682).
pub fn split(
    records: &[PatientRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>), DataError> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!("split ratios {ratios:?} do not sum to 1")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    shuffle(&mut order, &mut ChaCha8Rng::seed_from_u64(seed));
    let n = records.len();
    let n_train = (n as f64 * ratios[0]).floor() as usize;
    let n_valid = (n as f64 * ratios[1]).floor() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(DataError::Config(format!(
            "split of {n} patients at {ratios:?} leaves an empty part"
        )));
    }
    let pick = |idxs: &[usize]| idxs.iter().map(|&i| records[i].clone()).collect();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_valid]),
        pick(&order[n_train + n_valid..]),
    ))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// One padded mini-batch. Visit `t` of a patient is an input predicting the
/// codes of visit `t + 1`, so a patient with `T` visits contributes `T - 1`
/// input rows. Padded rows have `mask == false` and contribute nothing.
#[derive(Debug, Clone)]
pub struct Batch {
    pub patient_ids: Vec<u64>,
    /// Visit-axis width (max input count in the batch).
    pub max_inputs: usize,
    /// Note-axis width (max note length in the batch, floor 4 so the widest
    /// convolution filter always fits).
    pub note_cols: usize,
    pub codes: Vec<Vec<Vec<usize>>>,
    pub demo: Vec<Vec<[usize; DEMO_ATTRS]>>,
    pub notes: Vec<Vec<Vec<usize>>>,
    pub note_lens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    /// Code set of visit `t + 1`, the prediction target for input `t`.
    pub target_codes: Vec<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn input_count(&self, p: usize) -> usize {
        self.mask[p].iter().filter(|m| **m).count()
    }
}

/// Splits records into padded batches. When `shuffle_seed` is given the
/// patient order is shuffled first (one seed per epoch); otherwise record
/// order is preserved, which evaluation relies on.
pub fn make_batches(records: &[PatientRecord], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..records.len()).collect();
    if let Some(seed) = shuffle_seed {
        shuffle(&mut order, &mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| build_batch(records, chunk))
        .collect()
}

fn build_batch(records: &[PatientRecord], chunk: &[usize]) -> Batch {
    let max_inputs = chunk
        .iter()
        .map(|&i| records[i].visits.len().saturating_sub(1))
        .max()
        .unwrap_or(0)
        .max(1);
    let note_cols = chunk
        .iter()
        .flat_map(|&i| {
            let r = &records[i];
            r.visits[..r.visits.len() - 1].iter().map(|v| v.note.len())
        })
        .max()
        .unwrap_or(0)
        .max(4);

    let mut batch = Batch {
        patient_ids: Vec::with_capacity(chunk.len()),
        max_inputs,
        note_cols,
        codes: Vec::with_capacity(chunk.len()),
        demo: Vec::with_capacity(chunk.len()),
        notes: Vec::with_capacity(chunk.len()),
        note_lens: Vec::with_capacity(chunk.len()),
        mask: Vec::with_capacity(chunk.len()),
        target_codes: Vec::with_capacity(chunk.len()),
    };

    for &i in chunk {
        let r = &records[i];
        let inputs = r.visits.len() - 1;
        let mut codes = Vec::with_capacity(max_inputs);
        let mut demo = Vec::with_capacity(max_inputs);
        let mut notes = Vec::with_capacity(max_inputs);
        let mut note_lens = Vec::with_capacity(max_inputs);
        let mut mask = Vec::with_capacity(max_inputs);
        let mut targets = Vec::with_capacity(max_inputs);
        for t in 0..max_inputs {
            if t < inputs {
                let v = &r.visits[t];
                let mut padded = vec![PAD_TOKEN; note_cols];
                padded[..v.note.len()].copy_from_slice(&v.note);
                codes.push(v.codes.clone());
                demo.push(v.demo);
                notes.push(padded);
                note_lens.push(v.note.len());
                mask.push(true);
                targets.push(r.visits[t + 1].codes.clone());
            } else {
                codes.push(Vec::new());
                demo.push([0; DEMO_ATTRS]);
                notes.push(vec![PAD_TOKEN; note_cols]);
                note_lens.push(0);
                mask.push(false);
                targets.push(Vec::new());
            }
        }
        batch.patient_ids.push(r.patient_id);
        batch.codes.push(codes);
        batch.demo.push(demo);
        batch.notes.push(notes);
        batch.note_lens.push(note_lens);
        batch.mask.push(mask);
        batch.target_codes.push(targets);
    }
    batch
}

// ── Cohort file format: one JSON object per patient per line ───────────

pub fn save_cohort_jsonl(path: &Path, records: &[PatientRecord]) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|source| DataError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_cohort_jsonl(path: &Path) -> Result<Vec<PatientRecord>, DataError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| DataError::Json { line: i + 1, source })?,
        );
    }
    Ok(records)
}
