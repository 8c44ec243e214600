//! Importance scoring checked against a brute-force reimplementation that
//! materializes every activation with plain loops, plus the dead-unit case.

use elastic_core::backbone::{BackboneSpec, ElasticParams};
use elastic_core::data::TokenDataset;
use elastic_core::importance::score_importance;
use elastic_core::rng;

fn toy_spec() -> BackboneSpec {
    BackboneSpec {
        layers: 2,
        e_max: 12,
        d_head: 4,
        e_min: 4,
        h_min: 1,
        r_min: 0.5,
        r_max: 1.5,
        r_step: 0.5,
        tokens: 4,
        input_dim: 5,
        classes: 3,
        ln_eps: 1e-5,
    }
}

fn toy_data(spec: &BackboneSpec, n: usize, seed: u64) -> TokenDataset<f64> {
    let mut r = rng::seeded(seed);
    TokenDataset {
        features: (0..n * (spec.tokens - 1) * spec.input_dim)
            .map(|_| rng::standard_normal(&mut r))
            .collect(),
        labels: (0..n).map(|i| i % spec.classes).collect(),
        tokens: spec.tokens - 1,
        feat_dim: spec.input_dim,
    }
}

/// Everything the maximal model computes for one sample, written as naive
/// loops over explicitly materialized matrices.
struct BruteActivations {
    /// Final block output rows, tokens × e_max.
    block_out: Vec<Vec<f64>>,
    /// Per layer: tokens × hid rows of post-activation hidden units.
    hidden: Vec<Vec<Vec<f64>>>,
    /// Per layer, per head: tokens × d_head attention outputs before the
    /// output projection.
    head_out: Vec<Vec<Vec<Vec<f64>>>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn layernorm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
        .collect()
}

fn brute_forward(params: &ElasticParams<f64>, spec: &BackboneSpec, x: &[f64]) -> BruteActivations {
    let e = spec.e_max;
    let heads = spec.h_max();
    let d = spec.d_head;
    let hid = spec.hid_max();
    let toks = spec.tokens;

    // Token adapter, then prepend the class token, then positions.
    let mut stream: Vec<Vec<f64>> = Vec::with_capacity(toks);
    stream.push(params.cls.data[..e].to_vec());
    for t in 0..toks - 1 {
        let row = &x[t * spec.input_dim..(t + 1) * spec.input_dim];
        let mut out = vec![0.0; e];
        for (k, &v) in row.iter().enumerate() {
            for j in 0..e {
                out[j] += v * params.embed.data[k * e + j];
            }
        }
        stream.push(out);
    }
    for (t, row) in stream.iter_mut().enumerate() {
        for j in 0..e {
            row[j] += params.pos.data[t * e + j];
        }
    }

    let mut hidden = Vec::new();
    let mut head_out = Vec::new();
    for blk in &params.blocks {
        // Attention with every head materialized separately.
        let ln: Vec<Vec<f64>> = stream
            .iter()
            .map(|r| layernorm(r, &blk.ln1_gamma.data, &blk.ln1_beta.data, spec.ln_eps))
            .collect();
        let mut per_head: Vec<Vec<Vec<f64>>> = Vec::with_capacity(heads);
        let mut concat = vec![vec![0.0; heads * d]; toks];
        for m in 0..heads {
            let proj = |w: &[f64]| -> Vec<Vec<f64>> {
                ln.iter()
                    .map(|r| {
                        (0..d)
                            .map(|c| (0..e).map(|k| r[k] * w[k * e + m * d + c]).sum())
                            .collect()
                    })
                    .collect()
            };
            let q = proj(&blk.wq.data);
            let k = proj(&blk.wk.data);
            let v = proj(&blk.wv.data);
            let scale = 1.0 / (d as f64).sqrt();
            let mut out_m = vec![vec![0.0; d]; toks];
            for i in 0..toks {
                let logits: Vec<f64> = (0..toks)
                    .map(|j| scale * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..toks {
                    let w = exps[j] / denom;
                    for c in 0..d {
                        out_m[i][c] += w * v[j][c];
                    }
                }
            }
            for i in 0..toks {
                for c in 0..d {
                    concat[i][m * d + c] = out_m[i][c];
                }
            }
            per_head.push(out_m);
        }
        head_out.push(per_head);
        for i in 0..toks {
            for j in 0..e {
                let o: f64 = (0..heads * d)
                    .map(|k| concat[i][k] * blk.wo.data[k * e + j])
                    .sum();
                stream[i][j] += o;
            }
        }

        // MLP with the post-activation hidden rows kept.
        let ln2: Vec<Vec<f64>> = stream
            .iter()
            .map(|r| layernorm(r, &blk.ln2_gamma.data, &blk.ln2_beta.data, spec.ln_eps))
            .collect();
        let mut hid_rows = Vec::with_capacity(toks);
        for r in &ln2 {
            let row: Vec<f64> = (0..hid)
                .map(|j| {
                    gelu(
                        (0..e).map(|k| r[k] * blk.w1.data[k * hid + j]).sum::<f64>()
                            + blk.b1.data[j],
                    )
                })
                .collect();
            hid_rows.push(row);
        }
        for i in 0..toks {
            for j in 0..e {
                let z: f64 = (0..hid)
                    .map(|k| hid_rows[i][k] * blk.w2.data[k * e + j])
                    .sum::<f64>()
                    + blk.b2.data[j];
                stream[i][j] += z;
            }
        }
        hidden.push(hid_rows);
    }

    BruteActivations {
        block_out: stream,
        hidden,
        head_out,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn scores_match_explicit_activation_sums() {
    let spec = toy_spec();
    let mut r = rng::seeded(31);
    let params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
    let n = 8;
    let data = toy_data(&spec, n, 32);

    let report = score_importance(&params, &spec, &data, n).unwrap();

    let mut emb = vec![0.0; spec.e_max];
    let mut mlp = vec![vec![0.0; spec.hid_max()]; spec.layers];
    let mut heads = vec![vec![0.0; spec.h_max()]; spec.layers];
    for s in 0..n {
        let acts = brute_forward(&params, &spec, data.sample(s));
        for row in &acts.block_out {
            for (j, v) in row.iter().enumerate() {
                emb[j] += v.abs();
            }
        }
        for l in 0..spec.layers {
            for row in &acts.hidden[l] {
                for (j, v) in row.iter().enumerate() {
                    mlp[l][j] += v.abs();
                }
            }
            for (m, rows) in acts.head_out[l].iter().enumerate() {
                for row in rows {
                    for v in row {
                        heads[l][m] += v.abs();
                    }
                }
            }
        }
    }

    assert_eq!(report.sample_count, n);
    for j in 0..spec.e_max {
        assert!(close(report.emb[j], emb[j]), "emb[{j}]: {} vs {}", report.emb[j], emb[j]);
    }
    for l in 0..spec.layers {
        for j in 0..spec.hid_max() {
            assert!(
                close(report.mlp[l][j], mlp[l][j]),
                "mlp[{l}][{j}]: {} vs {}",
                report.mlp[l][j],
                mlp[l][j]
            );
        }
        for m in 0..spec.h_max() {
            assert!(
                close(report.heads[l][m], heads[l][m]),
                "head[{l}][{m}]: {} vs {}",
                report.heads[l][m],
                heads[l][m]
            );
        }
        assert!(report.mlp[l].iter().all(|&s| s >= 0.0));
        assert!(report.heads[l].iter().all(|&s| s >= 0.0));
    }
    assert!(report.emb.iter().all(|&s| s >= 0.0));
}

#[test]
fn dead_hidden_unit_scores_zero() {
    let spec = toy_spec();
    let mut r = rng::seeded(41);
    let mut params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
    // Kill hidden unit 3 of layer 0: zero its input column and push the
    // bias far into the flat tail of the activation.
    let hid = spec.hid_max();
    let dead = 3;
    for k in 0..spec.e_max {
        params.blocks[0].w1.data[k * hid + dead] = 0.0;
    }
    params.blocks[0].b1.data[dead] = -40.0;

    let data = toy_data(&spec, 6, 42);
    let report = score_importance(&params, &spec, &data, 6).unwrap();
    assert_eq!(
        report.mlp[0][dead], 0.0,
        "the activation underflows to exactly zero that far out"
    );
    let alive = report.mlp[0].iter().enumerate().filter(|&(j, _)| j != dead);
    for (j, &s) in alive {
        assert!(s > 0.0, "unit {j} should be live, score {s}");
    }
}
