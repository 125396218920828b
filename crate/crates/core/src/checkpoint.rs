//! Checkpoints: a text manifest plus one flat little-endian f64 blob.
//!
//! ```text
//! satformer-checkpoint 1
//! [model]
//! frames = 4
//! attention = "full"
//! ...
//! [bins]
//! y_min = 0.0
//! y_max = 26.75875
//! n = 64
//! [norm]
//! x_min = 0.1,0.2,...
//! x_max = ...
//! [class_weights]
//! weights = ...
//! histogram = ...
//! total = 512
//! [tensors]
//! patch_projection f64 176,32 0
//! cls_token f64 32 45056
//! ...
//! ```
//!
//! Model fields are JSON values. Floats are written in shortest round-trip
//! form, so every value reloads bit-exactly. Tensor lines give name, dtype,
//! shape and byte offset into `params.bin`, in canonical parameter order.

use std::fmt::Write as _;
use std::path::Path;

use crate::binning::{BinSpec, ClassWeights, NormStats};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
const HEADER: &str = "satformer-checkpoint 1";

/// Everything evaluation needs besides the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub bins: BinSpec,
    pub norm: NormStats,
    pub weights: ClassWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params,
}

fn join<T: std::fmt::Debug>(values: &[T]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn manifest_error(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: line as u64,
        message: format!("{MANIFEST_FILE} line {line}: {}", message.into()),
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: Params) -> Result<Self> {
        params.check_layout(&meta.model)?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let m = &self.meta;
        let mut text = String::new();
        let _ = writeln!(text, "{HEADER}\n[model]");
        let model = serde_json::to_value(&m.model).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in model.as_object().expect("config serializes to an object") {
            let _ = writeln!(text, "{k} = {v}");
        }
        let _ = writeln!(text, "[bins]\ny_min = {:?}\ny_max = {:?}\nn = {}", m.bins.y_min, m.bins.y_max, m.bins.n);
        let _ = writeln!(text, "[norm]\nx_min = {}\nx_max = {}", join(&m.norm.x_min), join(&m.norm.x_max));
        let _ = writeln!(
            text,
            "[class_weights]\nweights = {}\nhistogram = {}\ntotal = {}",
            join(&m.weights.weights),
            join(&m.weights.histogram),
            m.weights.total
        );
        text.push_str("[tensors]\n");
        let mut blob = Vec::with_capacity(self.params.count() * 8);
        for (name, t) in self.params.names().iter().zip(self.params.slots()) {
            let shape = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(text, "{name} f64 {shape} {}", blob.len());
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(dir.join(BLOB_FILE), blob)?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let blob = std::fs::read(dir.join(BLOB_FILE))?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(manifest_error(1, format!("expected {HEADER:?}"))),
        }

        let mut section = String::new();
        let mut model = serde_json::Map::new();
        let mut fields: Vec<(String, String, usize)> = Vec::new();
        let mut tensors: Vec<(usize, String, Vec<usize>, usize)> = Vec::new();
        for (no, line) in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            if section == "tensors" {
                let parts: Vec<&str> = line.split(' ').collect();
                let [name, dtype, shape, offset] = parts[..] else {
                    return Err(manifest_error(no, "expected `name dtype shape offset`"));
                };
                if dtype != "f64" {
                    return Err(manifest_error(no, format!("unsupported dtype {dtype}")));
                }
                let shape = shape
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| manifest_error(no, e.to_string()))?;
                let offset = offset.parse().map_err(|_| manifest_error(no, "bad offset"))?;
                tensors.push((no, name.to_string(), shape, offset));
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| manifest_error(no, "expected `key = value`"))?;
            if section == "model" {
                let v = serde_json::from_str(value).map_err(|e| manifest_error(no, e.to_string()))?;
                model.insert(key.to_string(), v);
            } else {
                fields.push((format!("{section}.{key}"), value.to_string(), no));
            }
        }

        let field = |key: &str| {
            fields
                .iter()
                .find(|(k, _, _)| k == key)
                .map(|(_, v, no)| (v.as_str(), *no))
                .ok_or_else(|| manifest_error(0, format!("missing {key}")))
        };
        fn parse_list<T: std::str::FromStr>((value, no): (&str, usize)) -> Result<Vec<T>> {
            if value.is_empty() {
                return Ok(Vec::new());
            }
            value
                .split(',')
                .map(|s| s.parse::<T>().map_err(|_| manifest_error(no, format!("bad number {s:?}"))))
                .collect()
        }
        fn parse_one<T: std::str::FromStr>((value, no): (&str, usize)) -> Result<T> {
            value.parse().map_err(|_| manifest_error(no, format!("bad number {value:?}")))
        }

        let model: ModelConfig =
            serde_json::from_value(model.into()).map_err(|e| Error::Config(format!("checkpoint model: {e}")))?;
        model.validate()?;
        let bins = BinSpec::new(
            parse_one(field("bins.y_min")?)?,
            parse_one(field("bins.y_max")?)?,
            parse_one(field("bins.n")?)?,
        )?;
        let norm = NormStats {
            x_min: parse_list(field("norm.x_min")?)?,
            x_max: parse_list(field("norm.x_max")?)?,
        };
        let weights = ClassWeights {
            weights: parse_list(field("class_weights.weights")?)?,
            histogram: parse_list(field("class_weights.histogram")?)?,
            total: parse_one(field("class_weights.total")?)?,
        };

        let layout = Params::layout(&model);
        let names = layout.names();
        if tensors.len() != names.len() {
            return Err(manifest_error(
                0,
                format!("{} tensors listed, config implies {}", tensors.len(), names.len()),
            ));
        }
        let mut expected_offset = 0;
        let mut loaded = Vec::with_capacity(tensors.len());
        for ((no, name, shape, offset), (want_name, want_shape)) in tensors.into_iter().zip(names.iter().zip(layout.slots())) {
            if &name != want_name || &shape != want_shape || offset != expected_offset {
                return Err(manifest_error(no, format!("tensor {name} does not match the layout")));
            }
            let len: usize = shape.iter().product();
            let end = offset + 8 * len;
            let bytes = blob.get(offset..end).ok_or_else(|| Error::Format {
                offset: blob.len() as u64,
                message: format!("{BLOB_FILE} truncated inside {name}"),
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            loaded.push(Tensor::new(&shape, data)?.trained());
            expected_offset = end;
        }
        if blob.len() != expected_offset {
            return Err(Error::Format {
                offset: expected_offset as u64,
                message: format!("{} trailing bytes in {BLOB_FILE}", blob.len() - expected_offset),
            });
        }
        let mut it = loaded.into_iter();
        let params = layout.map(|_, _| it.next().expect("count checked"));
        Self::new(CheckpointMeta { model, bins, norm, weights }, params)
    }
}
