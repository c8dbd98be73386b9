//! On-disk model directories.
//!
//! A model directory holds three text files:
//!
//! - `manifest.txt`: `key=value` metadata (format version, architecture, sizes).
//! - `embeddings.txt`: the embedding table, including its `<unk>` row.
//! - `params.txt`: each parameter as a `name rows cols` header followed by
//!   `rows` lines of space-separated values.
//!
//! Values are written in shortest round-trip form, so a save/load cycle
//! reproduces every parameter exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::encoders::{Activation, Architecture, Encoder};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::supervised::{PairHead, SentimentHead, TaskHead};
use crate::textdata::{load_embeddings_file, save_embeddings, EmbeddingTable};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const PARAMS_FILE: &str = "params.txt";

const KNOWN_KEYS: &[&str] =
    &["format_version", "arch", "dim", "out_dim", "activation", "layers", "output_gate", "lowercase", "head", "head_k"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub table: EmbeddingTable,
    pub lowercase: bool,
    pub head: Option<TaskHead>,
}

impl ModelBundle {
    pub fn new(encoder: Encoder, table: EmbeddingTable, lowercase: bool) -> Self {
        ModelBundle { encoder, table, lowercase, head: None }
    }

    /// Tokenizes with the bundle's casing rule and encodes.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        self.encoder.encode(&self.table, &crate::textdata::tokenize(text, self.lowercase))
    }

    fn manifest(&self) -> Vec<(String, String)> {
        let arch = self.encoder.architecture();
        let dim = self.table.dim();
        let mut m = vec![
            ("format_version".to_string(), FORMAT_VERSION.to_string()),
            ("arch".into(), arch.name().into()),
            ("dim".into(), dim.to_string()),
            ("out_dim".into(), self.encoder.output_dim(dim).to_string()),
        ];
        match arch {
            Architecture::Dan { layers, activation, .. } => {
                m.push(("layers".into(), layers.to_string()));
                m.push(("activation".into(), activation.to_string()));
            }
            Architecture::Rnn { activation } => m.push(("activation".into(), activation.to_string())),
            Architecture::Lstm { output_gate } => m.push(("output_gate".into(), output_gate.to_string())),
            _ => {}
        }
        m.push(("lowercase".into(), self.lowercase.to_string()));
        if let Some(h) = &self.head {
            m.push(("head".into(), h.task_name().into()));
            m.push(("head_k".into(), h.num_classes().to_string()));
        }
        m
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;

        let mut w = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
        for (k, v) in self.manifest() {
            writeln!(w, "{k}={v}")?;
        }
        w.flush()?;

        let w = BufWriter::new(fs::File::create(dir.join(EMBEDDINGS_FILE))?);
        save_embeddings(&self.table, w, true)?;

        let mut w = BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?);
        let head_params = self.head.as_ref().map(|h| h.params()).unwrap_or_default();
        let all = self
            .encoder
            .params()
            .into_iter()
            .chain(head_params.into_iter().map(|(n, m)| (n.to_string(), m)));
        for (name, m) in all {
            writeln!(w, "{name} {} {}", m.rows(), m.cols())?;
            for r in 0..m.rows() {
                let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Model(format!("model directory {} not found", dir.display())));
        }
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let get = |key: &str| {
            manifest.get(key).ok_or_else(|| Error::Model(format!("manifest is missing {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Model(format!("manifest {key} is not a number")))
        };
        let flag = |key: &str| -> Result<bool> {
            get(key)?.parse().map_err(|_| Error::Model(format!("manifest {key} is not true/false")))
        };

        let version: u32 = get("format_version")?
            .parse()
            .map_err(|_| Error::Model("manifest format_version is not a number".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Model(format!("model format version {version}, expected {FORMAT_VERSION}")));
        }
        let dim = num("dim")?;
        let out = num("out_dim")?;
        let arch = match get("arch")?.as_str() {
            "average" => Architecture::Average,
            "proj" => Architecture::Projection { out },
            "dan" => Architecture::Dan { layers: num("layers")?, out, activation: get("activation")?.parse::<Activation>()? },
            "rnn" => Architecture::Rnn { activation: get("activation")?.parse()? },
            "irnn" => Architecture::IRnn,
            "lstm" => Architecture::Lstm { output_gate: flag("output_gate")? },
            other => return Err(Error::Model(format!("unknown architecture {other:?}"))),
        };
        let lowercase = flag("lowercase")?;

        let table = load_embeddings_file(dir.join(EMBEDDINGS_FILE))?;
        if table.dim() != dim {
            return Err(Error::Model(format!("embeddings have dimension {}, manifest says {dim}", table.dim())));
        }

        let mut params = read_params(&dir.join(PARAMS_FILE))?;
        let mut encoder = Encoder::zeroed(arch, dim)?;
        let names: Vec<String> = encoder.params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(encoder.params_mut()) {
            let m = take(&mut params, name, slot.shape())?;
            *slot = m;
        }

        let head = match manifest.get("head").map(String::as_str) {
            None => None,
            Some(kind) => Some(load_head(kind, &mut params, num("head_k").ok())?),
        };
        if let Some(extra) = params.keys().next() {
            log::warn!("ignoring unexpected parameter {extra} in {}", PARAMS_FILE);
        }
        if encoder.output_dim(dim) != out {
            return Err(Error::Model(format!("parameters give output dimension {}, manifest says {out}", encoder.output_dim(dim))));
        }
        Ok(ModelBundle { encoder, table, lowercase, head })
    }
}

fn take(params: &mut BTreeMap<String, Matrix>, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let m = params.remove(name).ok_or_else(|| Error::Model(format!("parameter matrix {name} missing from {PARAMS_FILE}")))?;
    if m.shape() != shape {
        return Err(Error::Model(format!("parameter {name} has shape {:?}, expected {shape:?}", m.shape())));
    }
    Ok(m)
}

fn take_any(params: &mut BTreeMap<String, Matrix>, name: &str) -> Result<Matrix> {
    params.remove(name).ok_or_else(|| Error::Model(format!("parameter matrix {name} missing from {PARAMS_FILE}")))
}

fn load_head(kind: &str, params: &mut BTreeMap<String, Matrix>, k: Option<usize>) -> Result<TaskHead> {
    let bad = |what: &str| Error::Model(format!("inconsistent head parameter shapes ({what})"));
    match kind {
        "similarity" | "entailment" => {
            let h = PairHead {
                w_times: take_any(params, "head.w_times")?,
                w_plus: take_any(params, "head.w_plus")?,
                b_h: take_any(params, "head.b_h")?,
                w_out: take_any(params, "head.w_out")?,
                b_out: take_any(params, "head.b_out")?,
            };
            let hidden = h.w_times.rows();
            if h.w_plus.shape() != h.w_times.shape()
                || h.b_h.shape() != (hidden, 1)
                || h.w_out.cols() != hidden
                || h.b_out.shape() != (h.w_out.rows(), 1)
            {
                return Err(bad(kind));
            }
            if kind == "entailment" {
                if h.w_out.rows() != 3 {
                    return Err(bad("entailment needs 3 outputs"));
                }
                Ok(TaskHead::Entailment(h))
            } else {
                let k_out = h.w_out.rows();
                if k.is_some_and(|k| k != k_out) {
                    return Err(bad("head_k"));
                }
                Ok(TaskHead::Similarity { head: h, k: k_out })
            }
        }
        "sentiment" => {
            let h = SentimentHead {
                w_h: take_any(params, "head.w_h")?,
                b_h: take_any(params, "head.b_h")?,
                w_out: take_any(params, "head.w_out")?,
                b_out: take_any(params, "head.b_out")?,
            };
            let hidden = h.w_h.rows();
            if h.b_h.shape() != (hidden, 1) || h.w_out.shape() != (2, hidden) || h.b_out.shape() != (2, 1) {
                return Err(bad(kind));
            }
            Ok(TaskHead::Sentiment(h))
        }
        other => Err(Error::Model(format!("unknown head kind {other:?}"))),
    }
}

fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = fs::File::open(path).map_err(|e| Error::Model(format!("cannot open {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(i + 1, format!("expected key=value in {MANIFEST_FILE}")))?;
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            log::warn!("unknown manifest key {k:?} ignored");
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn read_params(path: &Path) -> Result<BTreeMap<String, Matrix>> {
    let file = fs::File::open(path).map_err(|e| Error::Model(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut out = BTreeMap::new();
    while let Some((i, header)) = lines.next() {
        let header = header?;
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(Error::format(i + 1, "expected `name rows cols` header"));
        };
        let rows: usize = rows.parse().map_err(|_| Error::format(i + 1, "bad row count"))?;
        let cols: usize = cols.parse().map_err(|_| Error::format(i + 1, "bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (j, line) = lines.next().ok_or_else(|| Error::format(i + 1, format!("{name}: truncated matrix")))?;
            let line = line?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| Error::format(j + 1, format!("bad number {tok:?}")))?);
            }
            if data.len() - before != cols {
                return Err(Error::format(j + 1, format!("{name}: expected {cols} values")));
            }
        }
        if out.insert(name.to_string(), Matrix::from_vec(rows, cols, data)?).is_some() {
            return Err(Error::format(i + 1, format!("duplicate parameter {name}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::synth::{SynthConfig, SynthCorpus};

    fn corpus() -> SynthCorpus {
        SynthCorpus::generate(&SynthConfig { dim: 6, eval_pairs: 20, ..SynthConfig::default() })
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = corpus();
        let mut rng = Rng::new(8);
        for arch in [
            Architecture::Average,
            Architecture::Projection { out: 9 },
            Architecture::Dan { layers: 2, out: 5, activation: Activation::Relu },
            Architecture::Rnn { activation: Activation::Tanh },
            Architecture::IRnn,
            Architecture::Lstm { output_gate: true },
            Architecture::Lstm { output_gate: false },
        ] {
            let mut b = ModelBundle::new(Encoder::new(arch, 6, &mut rng).unwrap(), c.table.clone(), true);
            let out = b.encoder.output_dim(6);
            b.head = Some(TaskHead::similarity(out, 4, 5, &mut rng));
            let dir = tempfile::tempdir().unwrap();
            b.save(dir.path()).unwrap();
            let back = ModelBundle::load(dir.path()).unwrap();
            assert_eq!(back.encoder, b.encoder);
            assert_eq!(back.head, b.head);
            for s in &c.eval.items {
                assert_eq!(back.encoder.encode(&back.table, &s.right).unwrap(), b.encoder.encode(&b.table, &s.right).unwrap());
            }
            assert_eq!(back.encode_text("T0_1 never_seen").unwrap(), b.encode_text("T0_1 never_seen").unwrap());
        }
    }

    #[test]
    fn missing_gate_matrix_is_named() {
        let c = corpus();
        let b = ModelBundle::new(Encoder::new(Architecture::Lstm { output_gate: true }, 6, &mut Rng::new(1)).unwrap(), c.table, false);
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(PARAMS_FILE)).unwrap();
        let mut kept = Vec::new();
        let mut skip = 0;
        for line in text.lines() {
            if skip > 0 {
                skip -= 1;
                continue;
            }
            if line.starts_with("w_co ") {
                skip = line.split_whitespace().nth(1).unwrap().parse().unwrap();
                continue;
            }
            kept.push(line);
        }
        fs::write(dir.path().join(PARAMS_FILE), kept.join("\n")).unwrap();
        match ModelBundle::load(dir.path()) {
            Err(Error::Model(msg)) => assert!(msg.contains("w_co"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_checks() {
        let c = corpus();
        let b = ModelBundle::new(Encoder::Average, c.table, false);
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, format!("{text}trained_on=toy\n")).unwrap();
        assert_eq!(ModelBundle::load(dir.path()).unwrap().encoder, Encoder::Average);

        fs::write(&path, text.replace("format_version=1", "format_version=7")).unwrap();
        assert!(matches!(ModelBundle::load(dir.path()), Err(Error::Model(m)) if m.contains("version")));

        assert!(matches!(ModelBundle::load(dir.path().join("nope")), Err(Error::Model(_))));
    }
}
