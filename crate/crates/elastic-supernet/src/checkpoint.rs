//! Self-describing parameter checkpoints.
//!
//! Layout: a plain-text header (magic line `EAVT1`, one `key=value` line
//! per backbone field, one `tensor=<name> rows=<r> cols=<c> offset=<o>`
//! line per tensor in slot order, a terminating `end` line) followed by a
//! raw payload of little-endian 32-bit floats, tensors in declaration
//! order. Offsets are byte positions within the payload, so a reader can
//! seek to any tensor directly; the writer emits them contiguously.
//!
//! Router tensors (`router.*`) are optional trailing entries: present in
//! the combined checkpoint written after router training, absent before.

use std::fs;
use std::path::Path;

use elastic_core::backbone::{BackboneSpec, ElasticParams};
use elastic_core::router::{RouterParams, ROUTER_SLOTS};
use elastic_core::scalar::Scalar;

use crate::error::{CliError, Result};

pub const MAGIC: &str = "EAVT1";

/// Backbone tensor names in slot order for `layers` blocks.
pub fn tensor_names(layers: usize) -> Vec<String> {
    let mut names = vec!["embed".to_string(), "cls".to_string(), "pos".to_string()];
    for l in 0..layers {
        for part in [
            "ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo", "ln2_gamma", "ln2_beta", "w1", "b1",
            "w2", "b2",
        ] {
            names.push(format!("block{l}.{part}"));
        }
    }
    for tail in ["ln_f_gamma", "ln_f_beta", "head_w", "head_b"] {
        names.push(tail.to_string());
    }
    names
}

pub const ROUTER_TENSOR_NAMES: [&str; ROUTER_SLOTS] =
    ["router.w_in", "router.b_in", "router.w_out", "router.b_out"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: BackboneSpec,
    pub params: ElasticParams<T>,
    pub router: Option<RouterParams<T>>,
}

fn spec_lines(spec: &BackboneSpec) -> String {
    format!(
        "layers={}\ne_max={}\nd_head={}\ne_min={}\nh_min={}\nr_min={:?}\nr_max={:?}\nr_step={:?}\ntokens={}\ninput_dim={}\nclasses={}\nln_eps={:?}\n",
        spec.layers,
        spec.e_max,
        spec.d_head,
        spec.e_min,
        spec.h_min,
        spec.r_min,
        spec.r_max,
        spec.r_step,
        spec.tokens,
        spec.input_dim,
        spec.classes,
        spec.ln_eps
    )
}

pub fn save<T: Scalar>(
    path: &Path,
    spec: &BackboneSpec,
    params: &ElasticParams<T>,
    router: Option<&RouterParams<T>>,
) -> Result<()> {
    let tensors = params.tensors();
    let names = tensor_names(spec.layers);
    debug_assert_eq!(tensors.len(), names.len());

    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&spec_lines(spec));

    let mut payload: Vec<u8> = Vec::new();
    let mut describe = |name: &str, rows: usize, cols: usize, data: &[T], header: &mut String| {
        header.push_str(&format!(
            "tensor={name} rows={rows} cols={cols} offset={}\n",
            payload.len()
        ));
        for v in data {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for (name, t) in names.iter().zip(&tensors) {
        describe(name, t.rows, t.cols, &t.data, &mut header);
    }
    if let Some(r) = router {
        for (idx, name) in ROUTER_TENSOR_NAMES.iter().enumerate() {
            let t = r.tensor(idx);
            describe(name, t.rows, t.cols, &t.data, &mut header);
        }
    }
    header.push_str("end\n");

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(CliError::io(path))
}

struct TensorDesc {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

fn parse_header(text: &str, path: &Path) -> Result<(BackboneSpec, Vec<TensorDesc>, usize)> {
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut consumed = 0usize;
    let mut lines = text.split_inclusive('\n').map(|raw| {
        let at = consumed;
        consumed += raw.len();
        (at, raw.strip_suffix('\n').unwrap_or(raw))
    });

    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((_, other)) => {
            return Err(bad(format!(
                "bad magic {other:?} at offset 0, expected {MAGIC:?}"
            )))
        }
        None => return Err(bad("empty file".into())),
    }

    let mut fields: std::collections::BTreeMap<String, String> = Default::default();
    let mut tensors: Vec<TensorDesc> = Vec::new();
    let mut saw_end = false;
    for (at, line) in &mut lines {
        if line == "end" {
            saw_end = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor=") {
            let mut parts = rest.split(' ');
            let name = parts
                .next()
                .filter(|n| !n.is_empty())
                .ok_or_else(|| bad(format!("tensor line without name at offset {at}")))?;
            let mut get = |key: &str| -> Result<usize> {
                let tok = parts
                    .next()
                    .ok_or_else(|| bad(format!("tensor {name}: missing {key} at offset {at}")))?;
                let val = tok
                    .strip_prefix(&format!("{key}="))
                    .ok_or_else(|| bad(format!("tensor {name}: expected {key}=, got {tok:?}")))?;
                val.parse()
                    .map_err(|_| bad(format!("tensor {name}: bad {key} value {val:?}")))
            };
            let rows = get("rows")?;
            let cols = get("cols")?;
            let offset = get("offset")?;
            tensors.push(TensorDesc {
                name: name.to_string(),
                rows,
                cols,
                offset,
            });
        } else if let Some((key, value)) = line.split_once('=') {
            if fields.insert(key.to_string(), value.to_string()).is_some() {
                return Err(bad(format!("duplicate field {key:?} at offset {at}")));
            }
        } else {
            return Err(bad(format!("unparseable header line {line:?} at offset {at}")));
        }
    }
    if !saw_end {
        return Err(bad(format!(
            "header ended without 'end' at offset {consumed}"
        )));
    }

    let int = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .ok_or_else(|| bad(format!("missing field {key:?}")))?
            .parse()
            .map_err(|_| bad(format!("bad integer for {key:?}")))
    };
    let real = |key: &str| -> Result<f64> {
        fields
            .get(key)
            .ok_or_else(|| bad(format!("missing field {key:?}")))?
            .parse()
            .map_err(|_| bad(format!("bad real for {key:?}")))
    };
    let spec = BackboneSpec {
        layers: int("layers")?,
        e_max: int("e_max")?,
        d_head: int("d_head")?,
        e_min: int("e_min")?,
        h_min: int("h_min")?,
        r_min: real("r_min")?,
        r_max: real("r_max")?,
        r_step: real("r_step")?,
        tokens: int("tokens")?,
        input_dim: int("input_dim")?,
        classes: int("classes")?,
        ln_eps: real("ln_eps")?,
    };
    let known = [
        "layers",
        "e_max",
        "d_head",
        "e_min",
        "h_min",
        "r_min",
        "r_max",
        "r_step",
        "tokens",
        "input_dim",
        "classes",
        "ln_eps",
    ];
    if let Some(stray) = fields.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(bad(format!("unknown field {stray:?}")));
    }
    spec.validate().map_err(|e| bad(e.to_string()))?;
    Ok((spec, tensors, consumed))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));

    // The header is ASCII; find its `end` line without assuming the
    // payload is valid UTF-8.
    let needle = b"\nend\n";
    let end = bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .ok_or_else(|| bad("no 'end' marker; file truncated or not a checkpoint".into()))?;
    let header_len = end + needle.len();
    let header = std::str::from_utf8(&bytes[..header_len])
        .map_err(|_| bad("header is not valid UTF-8".into()))?;
    let (spec, descs, parsed_len) = parse_header(header, path)?;
    debug_assert_eq!(parsed_len, header_len);
    let payload = &bytes[header_len..];

    // Names and shapes must match the spec-derived layout exactly, with
    // the router block optional.
    let expected = tensor_names(spec.layers);
    let has_router = descs.len() == expected.len() + ROUTER_SLOTS;
    if !has_router && descs.len() != expected.len() {
        return Err(bad(format!(
            "{} tensors, expected {} (backbone) or {} (with router)",
            descs.len(),
            expected.len(),
            expected.len() + ROUTER_SLOTS
        )));
    }

    let mut cursor = 0usize;
    let mut read_tensor = |desc: &TensorDesc, rows: usize, cols: usize| -> Result<Vec<T>> {
        if desc.rows != rows || desc.cols != cols {
            return Err(bad(format!(
                "tensor {}: shape {}x{}, expected {rows}x{cols}",
                desc.name, desc.rows, desc.cols
            )));
        }
        if desc.offset != cursor {
            return Err(bad(format!(
                "tensor {}: payload offset {}, expected {cursor}",
                desc.name, desc.offset
            )));
        }
        let n = rows * cols * 4;
        let end = cursor + n;
        if end > payload.len() {
            return Err(bad(format!(
                "tensor {}: payload truncated at byte {} of {} (header offset {})",
                desc.name,
                payload.len(),
                end,
                header_len + cursor
            )));
        }
        let data = payload[cursor..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        cursor = end;
        Ok(data)
    };

    // Materialize a correctly-shaped parameter store, then overwrite every
    // tensor from the payload in slot order.
    let mut params: ElasticParams<T> =
        ElasticParams::init(&spec, &mut elastic_core::rng::seeded(0));
    for ((desc, name), t) in descs.iter().zip(&expected).zip(params.tensors_mut()) {
        if &desc.name != name {
            return Err(bad(format!(
                "tensor order: found {:?}, expected {name:?}",
                desc.name
            )));
        }
        t.data = read_tensor(desc, t.rows, t.cols)?;
    }

    let router = if has_router {
        let router_descs = &descs[expected.len()..];
        let hidden = router_descs[0].cols;
        let mut router: RouterParams<T> =
            RouterParams::init(&spec, hidden, &mut elastic_core::rng::seeded(0));
        for (idx, (desc, name)) in router_descs.iter().zip(ROUTER_TENSOR_NAMES).enumerate() {
            if desc.name != name {
                return Err(bad(format!(
                    "router tensor order: found {:?}, expected {name:?}",
                    desc.name
                )));
            }
            let t = &mut router.tensors_mut()[idx];
            let (rows, cols) = (t.rows, t.cols);
            let data = read_tensor(desc, rows, cols)?;
            router.tensors_mut()[idx].data = data;
        }
        router.validate(&spec).map_err(|e| bad(e.to_string()))?;
        Some(router)
    } else {
        None
    };

    if cursor != payload.len() {
        return Err(bad(format!(
            "{} trailing payload bytes after the last tensor",
            payload.len() - cursor
        )));
    }
    Ok(Checkpoint {
        spec,
        params,
        router,
    })
}
