//! Whole-model assembly: canonical parameter layout, initialization, tape
//! binding, and the per-patient forward pass from raw visit data to
//! next-visit probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Pooling};
use crate::data::{Batch, DEMO_ATTRS, DEMO_CARDINALITIES};
use crate::encoders::{
    encode_codes, encode_demographics, encode_notes, parent_head, CodeEncoderWires,
    DemoEncoderWires, NoteEncoderWires,
};
use crate::fusion::{
    attention_mask, cmt_forward, mag_fuse, predict, self_attention_stream, sum_fuse,
    temporal_project, AttnWires, BlockWires, LnWires, MagWires,
};
use crate::nn::{Fwd, Linear};
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor, TensorId, TensorResult};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Affine { fan_in: usize },
    /// `N(0, 0.02)`.
    Embedding,
    Zeros,
    Ones,
    /// `U(0, 1)`; the gate scale starts random.
    UnitUniform,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push((name, shape, init));
    }

    fn affine(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.tensor(format!("{prefix}.w"), vec![d_in, d_out], Init::Affine { fan_in: d_in });
        self.tensor(format!("{prefix}.b"), vec![d_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.tensor(format!("{prefix}.g"), vec![d], Init::Ones);
        self.tensor(format!("{prefix}.b"), vec![d], Init::Zeros);
    }

    fn block(&mut self, prefix: &str, d: usize, d_ff: usize, cross: bool) {
        self.norm(&format!("{prefix}.ln_q"), d);
        if cross {
            self.norm(&format!("{prefix}.ln_kv"), d);
        }
        for proj in ["wq", "wk", "wv", "wo"] {
            self.affine(&format!("{prefix}.attn.{proj}"), d, d);
        }
        self.norm(&format!("{prefix}.ln_ff"), d);
        self.affine(&format!("{prefix}.ffn.l1"), d, d_ff);
        self.affine(&format!("{prefix}.ffn.l2"), d_ff, d);
    }
}

/// The model: configuration plus the label/vocabulary sizes it was built for.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub leaves: usize,
    pub parents: usize,
    pub vocab: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig, leaves: usize, parents: usize, vocab: usize) -> Self {
        Model { cfg, leaves, parents, vocab }
    }

    fn layout_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.cfg.hidden;
        let d_note = self.cfg.note_hidden;
        let d_w = self.cfg.word_dim;
        let demo_dim = self.cfg.demo_dim();
        let d_ff = self.cfg.ff_hidden();
        let mut b = LayoutBuilder { specs: Vec::new() };

        b.tensor("enc.code.table".into(), vec![self.leaves, d], Init::Embedding);
        b.affine("enc.code.proj", d, d);
        for (a, card) in DEMO_CARDINALITIES.iter().enumerate() {
            b.tensor(format!("enc.demo.table{a}"), vec![*card, demo_dim], Init::Embedding);
        }
        b.affine("enc.demo.proj", DEMO_ATTRS * demo_dim, d);
        b.tensor("enc.word.table".into(), vec![self.vocab, d_w], Init::Embedding);
        for f in &self.cfg.note_filters {
            b.tensor(
                format!("enc.note.conv{f}.k"),
                vec![*f, d_w, d_note],
                Init::Affine { fan_in: f * d_w },
            );
            b.tensor(format!("enc.note.conv{f}.b"), vec![d_note], Init::Zeros);
        }
        b.affine("enc.note.proj", self.cfg.note_filters.len() * d_note, d);

        for m in ["code", "demo", "note"] {
            b.affine(&format!("head.parent.{m}"), d, self.parents);
        }

        let w = self.cfg.projector_width;
        for m in ["code", "demo", "note"] {
            b.tensor(format!("proj.{m}.k"), vec![w, d, d], Init::Affine { fan_in: w * d });
            b.tensor(format!("proj.{m}.b"), vec![d], Init::Zeros);
        }

        for m in ["demo", "note"] {
            for i in 0..self.cfg.layers {
                b.block(&format!("cmt.{m}.l{i}"), d, d_ff, true);
            }
        }
        for m in ["code", "demo", "note"] {
            for i in 0..self.cfg.layers {
                b.block(&format!("sa.{m}.l{i}"), d, d_ff, false);
            }
        }

        b.affine("mag.gate", 3 * d, 1);
        b.affine("mag.disp", 2 * d, d);
        b.tensor("mag.beta".into(), vec![1], Init::UnitUniform);
        b.norm("mag.ln", d);
        b.affine("head.predict", d, self.leaves);

        b.specs
    }

    /// `(name, shape)` pairs in canonical order; checkpoint validation runs
    /// against this.
    pub fn expected_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layout_specs()
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect()
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape, init) in self.layout_specs() {
            let tensor = match init {
                Init::Affine { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(shape, -bound, bound, &mut rng)
                }
                Init::Embedding => Tensor::normal(shape, 0.0, 0.02, &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => {
                    let n = shape.iter().product();
                    Tensor::new(shape, vec![1.0; n]).expect("shape/data consistent")
                }
                Init::UnitUniform => Tensor::uniform(shape, 0.0, 1.0, &mut rng),
            };
            set.insert(&name, tensor).expect("layout names are unique");
        }
        set
    }

    /// Registers every parameter on the tape. The word-embedding table is
    /// non-trainable when the config freezes it.
    pub fn bind<'s>(&self, tape: &mut Tape, set: &'s ParamSet) -> Bound<'s> {
        let ids = set
            .iter()
            .map(|(name, tensor)| {
                let trainable = !(self.cfg.freeze_word_embeddings && name == "enc.word.table");
                tape.leaf(tensor, trainable)
            })
            .collect();
        Bound { set, ids }
    }
}

/// Tape handles for every parameter of one forward/backward cycle.
pub struct Bound<'s> {
    pub(crate) set: &'s ParamSet,
    pub ids: Vec<TensorId>,
}

impl Bound<'_> {
    pub fn id(&self, name: &str) -> TensorId {
        match self.set.position(name) {
            Some(i) => self.ids[i],
            None => panic!("parameter {name:?} not in layout"),
        }
    }

    fn lin(&self, prefix: &str) -> Linear {
        Linear { w: self.id(&format!("{prefix}.w")), b: self.id(&format!("{prefix}.b")) }
    }

    fn ln(&self, prefix: &str) -> LnWires {
        LnWires { gain: self.id(&format!("{prefix}.g")), bias: self.id(&format!("{prefix}.b")) }
    }

    fn blocks(&self, stack: &str, layers: usize, cross: bool) -> Vec<BlockWires> {
        (0..layers)
            .map(|i| {
                let p = format!("{stack}.l{i}");
                BlockWires {
                    ln_q: self.ln(&format!("{p}.ln_q")),
                    ln_kv: cross.then(|| self.ln(&format!("{p}.ln_kv"))),
                    attn: AttnWires {
                        wq: self.lin(&format!("{p}.attn.wq")),
                        wk: self.lin(&format!("{p}.attn.wk")),
                        wv: self.lin(&format!("{p}.attn.wv")),
                        wo: self.lin(&format!("{p}.attn.wo")),
                    },
                    ln_ff: self.ln(&format!("{p}.ln_ff")),
                    ffn: (self.lin(&format!("{p}.ffn.l1")), self.lin(&format!("{p}.ffn.l2"))),
                }
            })
            .collect()
    }
}

/// One patient's model-ready inputs; `notes` are cut to their true length
/// (padded back up to the widest filter when shorter).
pub struct PatientInputs<'a> {
    pub codes: &'a [Vec<usize>],
    pub demo: &'a [[usize; DEMO_ATTRS]],
    pub notes: Vec<Vec<usize>>,
}

/// Extracts the valid input visits of one batch patient.
pub fn batch_patient_inputs<'a>(batch: &'a Batch, p: usize, min_note_len: usize) -> PatientInputs<'a> {
    let t = batch.input_count(p);
    let notes = (0..t)
        .map(|v| {
            let len = batch.note_lens[p][v].max(min_note_len).min(batch.note_cols);
            batch.notes[p][v][..len].to_vec()
        })
        .collect();
    PatientInputs {
        codes: &batch.codes[p][..t],
        demo: &batch.demo[p][..t],
        notes,
    }
}

/// Everything the objectives need from one patient's forward pass.
pub struct PatientForward {
    /// `[T x |C|]` next-visit code probabilities.
    pub probs: TensorId,
    /// Parent-space probabilities per modality head: code, demo, note.
    pub parent_probs: [TensorId; 3],
    /// `[1 x d]` patient-level representation per modality (post-projector).
    pub pooled: [TensorId; 3],
}

/// Full forward pass for one patient.
///
/// Per the ablation switches: dropped modalities are zeroed after the
/// projector; `no_transformers` bypasses the attention stacks entirely;
/// `no_mag` fuses by summation; `no_code_centring` removes the code residual
/// and re-bases the gate on the stream mean.
pub fn forward_patient(
    fwd: &mut Fwd,
    model: &Model,
    bound: &Bound,
    inputs: &PatientInputs,
    ablation: &crate::config::AblationSwitches,
) -> TensorResult<PatientForward> {
    let cfg = &model.cfg;
    let t = inputs.codes.len();
    let d = cfg.hidden;

    // modality encoders
    let code_wires = CodeEncoderWires {
        table: bound.id("enc.code.table"),
        proj: bound.lin("enc.code.proj"),
    };
    let demo_wires = DemoEncoderWires {
        tables: std::array::from_fn(|a| bound.id(&format!("enc.demo.table{a}"))),
        proj: bound.lin("enc.demo.proj"),
    };
    let note_wires = NoteEncoderWires {
        word_table: bound.id("enc.word.table"),
        convs: cfg
            .note_filters
            .iter()
            .map(|f| (bound.id(&format!("enc.note.conv{f}.k")), bound.id(&format!("enc.note.conv{f}.b"))))
            .collect(),
        proj: bound.lin("enc.note.proj"),
    };
    let m_code = encode_codes(fwd, &code_wires, inputs.codes)?;
    let m_demo = encode_demographics(fwd, &demo_wires, inputs.demo)?;
    let m_note = encode_notes(fwd, &note_wires, &inputs.notes)?;

    // parent-category heads read the encoder features directly
    let parent_probs = [
        parent_head(fwd.tape, bound.lin("head.parent.code"), m_code)?,
        parent_head(fwd.tape, bound.lin("head.parent.demo"), m_demo)?,
        parent_head(fwd.tape, bound.lin("head.parent.note"), m_note)?,
    ];

    // temporal projectors
    let project = |fwd: &mut Fwd, m: TensorId, name: &str| -> TensorResult<TensorId> {
        temporal_project(fwd.tape, m, bound.id(&format!("proj.{name}.k")), bound.id(&format!("proj.{name}.b")))
    };
    let mut h_code = project(fwd, m_code, "code")?;
    let mut h_demo = project(fwd, m_demo, "demo")?;
    let mut h_note = project(fwd, m_note, "note")?;

    // modality-drop ablations zero the stream but keep the shape
    let zero_stream = |fwd: &mut Fwd| fwd.tape.constant(vec![t, d], vec![0.0; t * d]);
    if ablation.drop_code {
        h_code = zero_stream(fwd)?;
    }
    if ablation.drop_demo {
        h_demo = zero_stream(fwd)?;
    }
    if ablation.drop_note {
        h_note = zero_stream(fwd)?;
    }

    // patient-level pooling for the contrastive objective
    let pool = |fwd: &mut Fwd, h: TensorId| -> TensorResult<TensorId> {
        match cfg.pool {
            Pooling::Mean => fwd.tape.mean_over_time(h),
            Pooling::LastVisit => fwd.tape.slice_rows(h, t - 1, 1),
        }
    };
    let pooled = [pool(fwd, h_code)?, pool(fwd, h_demo)?, pool(fwd, h_note)?];

    // cross-modal + self-attention stacks
    let (y_code, y_demo, y_note) = if ablation.no_transformers {
        (h_code, h_demo, h_note)
    } else {
        let mask = attention_mask(t, t, cfg.causal, None);
        let mask = mask.as_deref();
        let heads = cfg.heads;
        let z_demo = cmt_forward(fwd, h_code, h_demo, &bound.blocks("cmt.demo", cfg.layers, true), heads, mask)?;
        let z_note = cmt_forward(fwd, h_code, h_note, &bound.blocks("cmt.note", cfg.layers, true), heads, mask)?;
        let mut y_code =
            self_attention_stream(fwd, h_code, &bound.blocks("sa.code", cfg.layers, false), heads, mask)?;
        let y_demo =
            self_attention_stream(fwd, z_demo, &bound.blocks("sa.demo", cfg.layers, false), heads, mask)?;
        let y_note =
            self_attention_stream(fwd, z_note, &bound.blocks("sa.note", cfg.layers, false), heads, mask)?;
        if !ablation.no_code_centring {
            // residual keeps the code stream dominant
            y_code = fwd.tape.add(y_code, h_code)?;
        }
        (y_code, y_demo, y_note)
    };

    // fusion
    let fused = if ablation.no_mag {
        sum_fuse(fwd, y_code, y_demo, y_note, bound.ln("mag.ln"))?
    } else {
        let wires = MagWires {
            gate: bound.lin("mag.gate"),
            disp: bound.lin("mag.disp"),
            beta: bound.id("mag.beta"),
            ln: bound.ln("mag.ln"),
        };
        mag_fuse(fwd, y_code, y_demo, y_note, &wires, !ablation.no_code_centring)?
    };

    let probs = predict(fwd.tape, fused, bound.lin("head.predict"))?;
    Ok(PatientForward { probs, parent_probs, pooled })
}
