//! Parameter layout and the computation graph shared by every variant.
//!
//! All variants use pre-norm blocks: `x ← x + Drop(Sublayer(LN(x)))`, with a
//! final layer norm before the output projection. Attention has no output
//! projection; heads are column slices of `W_Q`, `W_K`, `W_V`.

use crate::attention::AttentionMask;
use crate::error::{LabError, Result};
use crate::math::{glorot_bound, init_uniform, Matrix, SeededRng};

use super::config::{Architecture, ModelConfig, PositionalMode, SourceMask, Token};
use super::params::{ModelParams, ParamId};
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct PaIds {
    ln: LnIds,
    wp1: ParamId,
    bp1: ParamId,
    wp2: ParamId,
    bp2: ParamId,
    attn: AttnIds,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    ln_attn: LnIds,
    attn: AttnIds,
    cross: Option<(LnIds, AttnIds)>,
    pa: Option<PaIds>,
    ln_ffn: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct StackIds {
    word: ParamId,
    pos: ParamId,
    lang: Option<ParamId>,
    blocks: Vec<BlockIds>,
    ln_f: LnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    /// Encoder stack for ED; `None` when encoder and decoder are the same stack.
    encoder: Option<StackIds>,
    decoder: StackIds,
    output: ParamId,
}

enum Init {
    Ones,
    Zeros,
    Embedding,
    Glorot,
}

struct Builder<'a> {
    params: &'a mut ModelParams,
    rng: Option<&'a mut SeededRng>,
    d: usize,
}

impl Builder<'_> {
    /// Returns the tensor called `name`, creating it if needed (shared tensors are created once).
    fn ensure(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        if let Some(id) = self.params.id(name) {
            return Ok(id);
        }
        let m = match (init, self.rng.as_deref_mut()) {
            (Init::Ones, _) => Matrix::filled(rows, cols, 1.0),
            (Init::Zeros, _) | (_, None) => Matrix::zeros(rows, cols),
            (Init::Embedding, Some(rng)) => init_uniform(rows, cols, (3.0 / self.d as f64).sqrt(), rng),
            (Init::Glorot, Some(rng)) => init_uniform(rows, cols, glorot_bound(rows, cols), rng),
        };
        self.params.insert(name, m)
    }

    fn ln(&mut self, name: &str) -> Result<LnIds> {
        Ok(LnIds {
            g: self.ensure(&format!("{name}.g"), 1, self.d, Init::Ones)?,
            b: self.ensure(&format!("{name}.b"), 1, self.d, Init::Zeros)?,
        })
    }

    fn attn(&mut self, name: &str) -> Result<AttnIds> {
        let d = self.d;
        Ok(AttnIds {
            wq: self.ensure(&format!("{name}.wq"), d, d, Init::Glorot)?,
            wk: self.ensure(&format!("{name}.wk"), d, d, Init::Glorot)?,
            wv: self.ensure(&format!("{name}.wv"), d, d, Init::Glorot)?,
        })
    }

    fn stack(&mut self, prefix: &str, config: &ModelConfig, cross: bool, pa: bool) -> Result<StackIds> {
        let d = self.d;
        let v = config.vocab.size;
        let word = self.ensure(&format!("{prefix}emb.word"), v, d, Init::Embedding)?;
        let pos = self.ensure(&format!("{prefix}emb.pos"), config.max_positions, d, Init::Embedding)?;
        let lang = if config.language_embedding {
            Some(self.ensure(&format!("{prefix}emb.lang"), 2, d, Init::Embedding)?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{prefix}layer{l}");
            let ln_attn = self.ln(&format!("{p}.ln1"))?;
            let attn = self.attn(&format!("{p}.attn"))?;
            let cross = if cross {
                Some((self.ln(&format!("{p}.ln_cross"))?, self.attn(&format!("{p}.cross"))?))
            } else {
                None
            };
            let pa = if pa {
                Some(PaIds {
                    ln: self.ln(&format!("{p}.ln_pa"))?,
                    wp1: self.ensure(&format!("{p}.pa.wp1"), d, d, Init::Glorot)?,
                    bp1: self.ensure(&format!("{p}.pa.bp1"), 1, d, Init::Zeros)?,
                    wp2: self.ensure(&format!("{p}.pa.wp2"), d, d, Init::Glorot)?,
                    bp2: self.ensure(&format!("{p}.pa.bp2"), 1, d, Init::Zeros)?,
                    attn: self.attn(&format!("{p}.pa.attn"))?,
                })
            } else {
                None
            };
            let ln_ffn = self.ln(&format!("{p}.ln2"))?;
            let f = config.ffn_width;
            let ffn = FfnIds {
                w1: self.ensure(&format!("{p}.ffn.w1"), d, f, Init::Glorot)?,
                b1: self.ensure(&format!("{p}.ffn.b1"), 1, f, Init::Zeros)?,
                w2: self.ensure(&format!("{p}.ffn.w2"), f, d, Init::Glorot)?,
                b2: self.ensure(&format!("{p}.ffn.b2"), 1, d, Init::Zeros)?,
            };
            blocks.push(BlockIds { ln_attn, attn, cross, pa, ln_ffn, ffn });
        }
        let ln_f = self.ln(&format!("{prefix}ln_f"))?;
        Ok(StackIds { word, pos, lang, blocks, ln_f })
    }
}

fn build_layout(config: &ModelConfig, params: &mut ModelParams, rng: Option<&mut SeededRng>) -> Result<Layout> {
    let mut b = Builder { params, rng, d: config.d };
    let (encoder, decoder) = match config.architecture() {
        Architecture::DecoderOnly | Architecture::Regularized => {
            (None, b.stack("", config, false, config.partial_attention)?)
        }
        Architecture::EncoderDecoder => {
            let enc_prefix = if config.share_encoder_decoder_params { "dec." } else { "enc." };
            let enc = b.stack(enc_prefix, config, false, false)?;
            (Some(enc), b.stack("dec.", config, true, false)?)
        }
    };
    let output = if config.tie_output {
        decoder.word
    } else {
        b.ensure("out.w", config.vocab.size, config.d, Init::Embedding)?
    };
    Ok(Layout { encoder, decoder, output })
}

/// A configured model: its configuration, parameters and their resolved layout.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    layout: Layout,
}

impl Model {
    /// Freshly initialised model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::default();
        let mut rng = SeededRng::new(seed);
        let layout = build_layout(&config, &mut params, Some(&mut rng))?;
        Ok(Self { config, params, layout })
    }

    /// Model over existing parameters; names and shapes must match `config` exactly.
    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let mut expected = ModelParams::default();
        build_layout(&config, &mut expected, None)?;
        if expected.len() != params.len() {
            return Err(LabError::Format(format!(
                "expected {} parameter tensors for this config, found {}",
                expected.len(),
                params.len()
            )));
        }
        let mut ordered = ModelParams::default();
        for (name, m) in expected.iter() {
            let found = params
                .by_name(name)
                .ok_or_else(|| LabError::Format(format!("missing parameter {name}")))?;
            if found.shape() != m.shape() {
                return Err(LabError::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    m.shape()
                )));
            }
            ordered.insert(name, found.clone())?;
        }
        let layout = build_layout(&config, &mut ordered, None)?;
        Ok(Self { config, params: ordered, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams) {
        (self.config, self.params)
    }

    /// Number of scalar parameters (shared tensors counted once).
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Checks the pair against the vocabulary and the position budget.
    pub(crate) fn check_inputs(&self, s: &[Token], t: &[Token]) -> Result<()> {
        if s.is_empty() {
            return Err(LabError::InvalidArgument("source sequence is empty".into()));
        }
        let vocab = &self.config.vocab;
        vocab.check(s)?;
        vocab.check(t)?;
        let len = s.len() + t.len() + 1;
        if len > self.config.max_positions {
            return Err(LabError::PositionOverflow { len, max: self.config.max_positions });
        }
        Ok(())
    }
}

/// Logit rows of one forward pass, split at the separator.
///
/// `source` has `|s|` rows (predicting `s_2 … s_|s|, ⇒`), `target` has `|t| + 1`
/// rows (predicting `t_1 … t_|t|, eos`). When only the last prediction was
/// requested `target` has a single row.
pub(crate) struct GraphOut {
    pub source: Option<Var>,
    pub target: Var,
}

/// Which logit rows a graph must produce.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outputs {
    /// Source rows (when the architecture has them and `with_source`) and all target rows.
    All { with_source: bool },
    /// Only the prediction after the last target token (greedy decoding).
    LastTarget,
}

struct Graph<'t, 'p, 'r> {
    tape: &'t mut Tape<'p>,
    rng: Option<&'r mut SeededRng>,
    config: &'p ModelConfig,
}

impl Graph<'_, '_, '_> {
    fn drop(&mut self, x: Var) -> Var {
        let rate = self.config.dropout;
        self.tape.dropout(x, rate, self.rng.as_deref_mut())
    }

    fn ln(&mut self, x: Var, ids: LnIds) -> Var {
        let (g, b) = (self.tape.param(ids.g), self.tape.param(ids.b));
        self.tape.layer_norm(x, g, b)
    }

    fn attention(&mut self, ids: AttnIds, q_in: Var, kv_in: Var, mask: &AttentionMask) -> Result<Var> {
        let t = &mut *self.tape;
        let (wq, wk, wv) = (t.param(ids.wq), t.param(ids.wk), t.param(ids.wv));
        let q = t.matmul(q_in, wq);
        let k = t.matmul(kv_in, wk);
        let v = t.matmul(kv_in, wv);
        let heads = self.config.heads;
        let width = self.config.head_width();
        let scale = 1.0 / (width as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let (a, b) = (h * width, (h + 1) * width);
                (t.cols(q, a, b), t.cols(k, a, b), t.cols(v, a, b))
            };
            let scores = t.matmul_t(qh, kh);
            let scores = t.scale(scores, scale);
            let probs = t.softmax(scores, Some(mask))?;
            outs.push(t.matmul(probs, vh));
        }
        Ok(if heads == 1 { outs[0] } else { t.hstack(&outs) })
    }

    fn ffn(&mut self, x: Var, ids: FfnIds) -> Var {
        let t = &mut *self.tape;
        let (w1, b1, w2, b2) = (t.param(ids.w1), t.param(ids.b1), t.param(ids.w2), t.param(ids.b2));
        let h = t.matmul(x, w1);
        let h = t.add_row(h, b1);
        let h = t.gelu(h);
        let o = t.matmul(h, w2);
        t.add_row(o, b2)
    }

    /// `x + Drop(F(x))`
    fn residual(&mut self, x: Var, update: Var) -> Var {
        let update = self.drop(update);
        self.tape.add(x, update)
    }

    fn embed(&mut self, stack: &StackIds, tokens: &[Token], positions: &[usize], langs: &[usize]) -> Var {
        let t = &mut *self.tape;
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let word = t.param(stack.word);
        let pos = t.param(stack.pos);
        let w = t.gather(word, &ids);
        let p = t.gather(pos, positions);
        let mut g = t.add(w, p);
        if let Some(lang) = stack.lang {
            let table = t.param(lang);
            let l = t.gather(table, langs);
            g = t.add(g, l);
        }
        g
    }

    /// Source-only feedforward memory followed by attention from every row to it.
    fn partial_attention(&mut self, ids: PaIds, x: Var, s_len: usize) -> Result<Var> {
        let n = self.ln(x, ids.ln);
        let rows = self.tape.value(n).rows();
        let t = &mut *self.tape;
        let (wp1, bp1, wp2, bp2) = (t.param(ids.wp1), t.param(ids.bp1), t.param(ids.wp2), t.param(ids.bp2));
        let src = t.rows(n, 0, s_len);
        let p1 = t.matmul(src, wp1);
        let p1 = t.add_row(p1, bp1);
        let p1 = t.tanh(p1);
        let p1 = self.drop(p1);
        let t = &mut *self.tape;
        let p2 = t.matmul(p1, wp2);
        let p2 = t.add_row(p2, bp2);
        let p2 = self.drop(p2);
        let memory = self.tape.add(p2, p1);
        let mask = AttentionMask::full(rows, s_len)?;
        let out = self.attention(ids.attn, n, memory, &mask)?;
        Ok(self.residual(x, out))
    }

    fn ffn_block(&mut self, block: &BlockIds, x: Var) -> Var {
        let n = self.ln(x, block.ln_ffn);
        let f = self.ffn(n, block.ffn);
        self.residual(x, f)
    }

    fn logits(&mut self, output: ParamId, h: Var) -> Var {
        let w = self.tape.param(output);
        self.tape.matmul_t(h, w)
    }
}

fn source_mask(kind: SourceMask, n: usize) -> Result<AttentionMask> {
    match kind {
        SourceMask::Causal => crate::attention::make_causal_mask(n),
        SourceMask::Bidirectional => AttentionMask::full(n, n),
    }
}

fn target_positions(config: &ModelConfig, s_len: usize, t_len: usize) -> Vec<usize> {
    let offset = match config.positional_mode {
        PositionalMode::CPE => s_len,
        PositionalMode::SPE => 0,
    };
    (offset..=offset + t_len).collect()
}

fn decoder_input(config: &ModelConfig, t: &[Token]) -> Vec<Token> {
    std::iter::once(config.vocab.sep).chain(t.iter().copied()).collect()
}

/// Records the forward pass of `model` on `(s, t)` onto `tape`.
///
/// Dropout is active iff `rng` is `Some`.
pub(crate) fn build_graph<'p>(
    model: &'p Model,
    tape: &mut Tape<'p>,
    s: &[Token],
    t: &[Token],
    rng: Option<&mut SeededRng>,
    outputs: Outputs,
) -> Result<GraphOut> {
    model.check_inputs(s, t)?;
    let config = &model.config;
    let layout = &model.layout;
    let mut g = Graph { tape, rng, config };
    match config.architecture() {
        Architecture::DecoderOnly => decoder_only(&mut g, layout, s, t, outputs),
        Architecture::Regularized => regularized(&mut g, layout, s, t, outputs),
        Architecture::EncoderDecoder => encoder_decoder(&mut g, layout, s, t, outputs),
    }
}

fn decoder_only(g: &mut Graph, layout: &Layout, s: &[Token], t: &[Token], outputs: Outputs) -> Result<GraphOut> {
    let config = g.config;
    let (s_len, t_len) = (s.len(), t.len());
    let n = s_len + t_len + 1;
    let tokens: Vec<Token> = s.iter().copied().chain(decoder_input(config, t)).collect();
    let positions: Vec<usize> = (0..s_len).chain(target_positions(config, s_len, t_len)).collect();
    let langs: Vec<usize> = (0..n).map(|r| usize::from(r >= s_len)).collect();
    let mask = match config.source_mask {
        SourceMask::Causal => crate::attention::make_causal_mask(n)?,
        SourceMask::Bidirectional => crate::attention::make_prefix_mask(s_len, t_len + 1)?,
    };
    let stack = &layout.decoder;
    let mut h = g.embed(stack, &tokens, &positions, &langs);
    for block in &stack.blocks {
        let normed = g.ln(h, block.ln_attn);
        let a = g.attention(block.attn, normed, normed, &mask)?;
        h = g.residual(h, a);
        if let Some(pa) = block.pa {
            h = g.partial_attention(pa, h, s_len)?;
        }
        h = g.ffn_block(block, h);
    }
    match outputs {
        Outputs::LastTarget => {
            let last = g.tape.rows(h, n - 1, n);
            let hf = g.ln(last, stack.ln_f);
            Ok(GraphOut { source: None, target: g.logits(layout.output, hf) })
        }
        Outputs::All { .. } => {
            let hf = g.ln(h, stack.ln_f);
            let logits = g.logits(layout.output, hf);
            let source = g.tape.rows(logits, 0, s_len);
            let target = g.tape.rows(logits, s_len, n);
            Ok(GraphOut { source: Some(source), target })
        }
    }
}

fn regularized(g: &mut Graph, layout: &Layout, s: &[Token], t: &[Token], outputs: Outputs) -> Result<GraphOut> {
    let config = g.config;
    let (s_len, t_len) = (s.len(), t.len());
    let stack = &layout.decoder;
    let enc_mask = source_mask(config.source_mask, s_len)?;
    // Decoder row r sits at concatenated position s_len + r and sees every encoder row
    // plus decoder rows up to itself.
    let dec_mask = AttentionMask::from_fn(t_len + 1, s_len + t_len + 1, |r, c| c <= s_len + r)?;
    let dec_tokens = decoder_input(config, t);
    let mut he = g.embed(stack, s, &(0..s_len).collect::<Vec<_>>(), &vec![0; s_len]);
    let mut hd = g.embed(stack, &dec_tokens, &target_positions(config, s_len, t_len), &vec![1; t_len + 1]);
    for block in &stack.blocks {
        let ne = g.ln(he, block.ln_attn);
        let nd = g.ln(hd, block.ln_attn);
        let keys = g.tape.vstack(&[ne, nd]);
        let ae = g.attention(block.attn, ne, ne, &enc_mask)?;
        let ad = g.attention(block.attn, nd, keys, &dec_mask)?;
        he = g.residual(he, ae);
        hd = g.residual(hd, ad);
        he = g.ffn_block(block, he);
        hd = g.ffn_block(block, hd);
    }
    finish_two_stacks(g, layout.output, stack.ln_f, he, stack.ln_f, hd, outputs)
}

fn encoder_decoder(g: &mut Graph, layout: &Layout, s: &[Token], t: &[Token], outputs: Outputs) -> Result<GraphOut> {
    let config = g.config;
    let (s_len, t_len) = (s.len(), t.len());
    let enc = layout.encoder.as_ref().expect("encoder-decoder layout has an encoder");
    let dec = &layout.decoder;
    let enc_mask = source_mask(config.source_mask, s_len)?;
    let self_mask = crate::attention::make_causal_mask(t_len + 1)?;
    let cross_mask = AttentionMask::full(t_len + 1, s_len)?;

    let mut he = g.embed(enc, s, &(0..s_len).collect::<Vec<_>>(), &vec![0; s_len]);
    for block in &enc.blocks {
        let ne = g.ln(he, block.ln_attn);
        let a = g.attention(block.attn, ne, ne, &enc_mask)?;
        he = g.residual(he, a);
        he = g.ffn_block(block, he);
    }
    let memory = g.ln(he, enc.ln_f);

    let dec_tokens = decoder_input(config, t);
    let mut hd = g.embed(dec, &dec_tokens, &target_positions(config, s_len, t_len), &vec![1; t_len + 1]);
    for block in &dec.blocks {
        let nd = g.ln(hd, block.ln_attn);
        let a = g.attention(block.attn, nd, nd, &self_mask)?;
        hd = g.residual(hd, a);
        let (ln_cross, cross) = block.cross.expect("decoder blocks have cross attention");
        let nc = g.ln(hd, ln_cross);
        let c = g.attention(cross, nc, memory, &cross_mask)?;
        hd = g.residual(hd, c);
        hd = g.ffn_block(block, hd);
    }
    match outputs {
        Outputs::LastTarget => {
            let last = g.tape.rows(hd, t_len, t_len + 1);
            let hf = g.ln(last, dec.ln_f);
            Ok(GraphOut { source: None, target: g.logits(layout.output, hf) })
        }
        Outputs::All { with_source } => {
            let hf = g.ln(hd, dec.ln_f);
            let target = g.logits(layout.output, hf);
            let source = if with_source { Some(g.logits(layout.output, memory)) } else { None };
            Ok(GraphOut { source, target })
        }
    }
}

fn finish_two_stacks(
    g: &mut Graph,
    output: ParamId,
    enc_ln: LnIds,
    he: Var,
    dec_ln: LnIds,
    hd: Var,
    outputs: Outputs,
) -> Result<GraphOut> {
    match outputs {
        Outputs::LastTarget => {
            let rows = g.tape.value(hd).rows();
            let last = g.tape.rows(hd, rows - 1, rows);
            let hf = g.ln(last, dec_ln);
            Ok(GraphOut { source: None, target: g.logits(output, hf) })
        }
        Outputs::All { .. } => {
            let ef = g.ln(he, enc_ln);
            let df = g.ln(hd, dec_ln);
            let source = g.logits(output, ef);
            let target = g.logits(output, df);
            Ok(GraphOut { source: Some(source), target })
        }
    }
}
