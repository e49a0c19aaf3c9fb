//! Straight-line reference implementation of the forward passes.
//!
//! Plain nested vectors and explicit loops, reading parameters by name, so it
//! shares no code with the library's graph builder.

#![allow(dead_code)]

use palm_lab_core::models::{Model, PositionalMode, SourceMask, Token};

pub type Mat = Vec<Vec<f64>>;

pub fn get(model: &Model, name: &str) -> Mat {
    let m = model.params().by_name(name).unwrap_or_else(|| panic!("missing {name}"));
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for x in 0..k {
                acc += a[i][x] * b[x][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|c| a.iter().map(|row| row[c]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_bias(a: &Mat, b: &Mat) -> Mat {
    a.iter().map(|row| row.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|row| row.iter().map(|&x| f(x)).collect()).collect()
}

fn cols(a: &Mat, lo: usize, hi: usize) -> Mat {
    a.iter().map(|row| row[lo..hi].to_vec()).collect()
}

pub fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) / sd * g[0][c] + b[0][c]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head attention without output projection; `allowed(r, c)` is the mask.
pub fn attention(model: &Model, prefix: &str, q_in: &Mat, kv_in: &Mat, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let heads = model.config().heads;
    let d = model.config().d;
    let w = d / heads;
    let q = matmul(q_in, &get(model, &format!("{prefix}.wq")));
    let k = matmul(kv_in, &get(model, &format!("{prefix}.wk")));
    let v = matmul(kv_in, &get(model, &format!("{prefix}.wv")));
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h * w, (h + 1) * w), cols(&k, h * w, (h + 1) * w), cols(&v, h * w, (h + 1) * w));
        for r in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|c| {
                    if allowed(r, c) {
                        qh[r].iter().zip(&kh[c]).map(|(a, b)| a * b).sum::<f64>() / (w as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k.len() {
                for x in 0..w {
                    out[r][h * w + x] += e[c] / z * vh[c][x];
                }
            }
        }
    }
    out
}

fn ln(model: &Model, name: &str, x: &Mat) -> Mat {
    layer_norm(x, &get(model, &format!("{name}.g")), &get(model, &format!("{name}.b")))
}

fn ffn(model: &Model, p: &str, x: &Mat) -> Mat {
    let h = map(&add_bias(&matmul(x, &get(model, &format!("{p}.ffn.w1"))), &get(model, &format!("{p}.ffn.b1"))), gelu);
    add_bias(&matmul(&h, &get(model, &format!("{p}.ffn.w2"))), &get(model, &format!("{p}.ffn.b2")))
}

fn embed(model: &Model, prefix: &str, tokens: &[Token], positions: &[usize], langs: &[usize]) -> Mat {
    let word = get(model, &format!("{prefix}emb.word"));
    let pos = get(model, &format!("{prefix}emb.pos"));
    let lang = model.config().language_embedding.then(|| get(model, &format!("{prefix}emb.lang")));
    tokens
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            (0..model.config().d)
                .map(|c| {
                    word[t as usize][c] + pos[positions[r]][c] + lang.as_ref().map_or(0.0, |l| l[langs[r]][c])
                })
                .collect()
        })
        .collect()
}

fn output(model: &Model, h: &Mat) -> Mat {
    let w = if model.config().tie_output {
        let prefix = if model.params().by_name("dec.emb.word").is_some() { "dec." } else { "" };
        get(model, &format!("{prefix}emb.word"))
    } else {
        get(model, "out.w")
    };
    matmul(h, &transpose(&w))
}

fn target_positions(model: &Model, s_len: usize, t_len: usize) -> Vec<usize> {
    let start = if model.config().positional_mode == PositionalMode::CPE { s_len } else { 0 };
    (start..=start + t_len).collect()
}

/// Logits for every position of `s ⧺ [sep] ⧺ t` under a decoder-only configuration.
pub fn decoder_only(model: &Model, s: &[Token], t: &[Token]) -> Mat {
    let cfg = model.config();
    let (ns, nt) = (s.len(), t.len());
    let n = ns + nt + 1;
    let mut tokens = s.to_vec();
    tokens.push(cfg.vocab.sep);
    tokens.extend_from_slice(t);
    let mut positions: Vec<usize> = (0..ns).collect();
    positions.extend(target_positions(model, ns, nt));
    let langs: Vec<usize> = (0..n).map(|r| usize::from(r >= ns)).collect();
    let bidirectional = cfg.source_mask == SourceMask::Bidirectional;
    let allowed = |r: usize, c: usize| c <= r || (bidirectional && c < ns);
    let mut h = embed(model, "", &tokens, &positions, &langs);
    for l in 0..cfg.layers {
        let p = format!("layer{l}");
        let x = ln(model, &format!("{p}.ln1"), &h);
        h = add(&h, &attention(model, &format!("{p}.attn"), &x, &x, allowed));
        if cfg.partial_attention {
            let x = ln(model, &format!("{p}.ln_pa"), &h);
            let src: Mat = x[..ns].to_vec();
            let p1 = map(&add_bias(&matmul(&src, &get(model, &format!("{p}.pa.wp1"))), &get(model, &format!("{p}.pa.bp1"))), f64::tanh);
            let p2 = add_bias(&matmul(&p1, &get(model, &format!("{p}.pa.wp2"))), &get(model, &format!("{p}.pa.bp2")));
            let memory = add(&p2, &p1);
            h = add(&h, &attention(model, &format!("{p}.pa.attn"), &x, &memory, |_, _| true));
        }
        let x = ln(model, &format!("{p}.ln2"), &h);
        h = add(&h, &ffn(model, &p, &x));
    }
    output(model, &ln(model, "ln_f", &h))
}

/// Decoder logits (`|t| + 1` rows) of an encoder-decoder configuration.
pub fn encoder_decoder(model: &Model, s: &[Token], t: &[Token]) -> Mat {
    let cfg = model.config();
    let (ns, nt) = (s.len(), t.len());
    let enc = if cfg.share_encoder_decoder_params { "dec." } else { "enc." };
    let bidirectional = cfg.source_mask == SourceMask::Bidirectional;
    let mut he = embed(model, enc, s, &(0..ns).collect::<Vec<_>>(), &vec![0; ns]);
    for l in 0..cfg.layers {
        let p = format!("{enc}layer{l}");
        let x = ln(model, &format!("{p}.ln1"), &he);
        he = add(&he, &attention(model, &format!("{p}.attn"), &x, &x, |r, c| bidirectional || c <= r));
        let x = ln(model, &format!("{p}.ln2"), &he);
        he = add(&he, &ffn(model, &p, &x));
    }
    let memory = ln(model, &format!("{enc}ln_f"), &he);
    let mut tokens = vec![cfg.vocab.sep];
    tokens.extend_from_slice(t);
    let mut hd = embed(model, "dec.", &tokens, &target_positions(model, ns, nt), &vec![1; nt + 1]);
    for l in 0..cfg.layers {
        let p = format!("dec.layer{l}");
        let x = ln(model, &format!("{p}.ln1"), &hd);
        hd = add(&hd, &attention(model, &format!("{p}.attn"), &x, &x, |r, c| c <= r));
        let x = ln(model, &format!("{p}.ln_cross"), &hd);
        hd = add(&hd, &attention(model, &format!("{p}.cross"), &x, &memory, |_, _| true));
        let x = ln(model, &format!("{p}.ln2"), &hd);
        hd = add(&hd, &ffn(model, &p, &x));
    }
    output(model, &ln(model, "dec.ln_f", &hd))
}

pub fn max_abs_diff(a: &Mat, b: &palm_lab_core::Matrix) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape(), "shape");
    let mut worst = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}
