//! Manifest + blob model format.
//!
//! `<name>.json` is a UTF-8 JSON manifest; `<name>.bin` holds every weight
//! as little-endian `f32`, concatenated in manifest order. Kernels use the
//! `hwio` layout, dense weights `oi`, vectors `o`. Offsets and lengths are in
//! bytes and the manifest carries the CRC-32 of the whole blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    validate_graph, BottleneckUnit, ChannelAffine, Conv2D, ConvBlock, Dense, Graph, Layer,
    LayerSpec, Node, Pool, Shortcut,
};
use crate::error::{Error, LoadError, Result};
use crate::tensor::{ConvParams, DenseMatrix, Padding, PoolKind, Tensor4};

pub const MODEL_FORMAT: &str = "chanprune-model";
const FORMAT_VERSION: u32 = 1;

const KNOWN_KINDS: &[&str] = &[
    "conv2d",
    "relu",
    "pool",
    "channel_affine",
    "dense",
    "flatten",
    "channel_sample",
    "bottleneck",
];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    input_shape: [usize; 3],
    blob: String,
    blob_len: u64,
    blob_crc32: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    nodes: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRef {
    dtype: String,
    shape: Vec<usize>,
    layout: String,
    blob_offset: u64,
    blob_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvEntry {
    stride: usize,
    padding: Padding,
    kernel: TensorRef,
    bias: Option<TensorRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AffineEntry {
    scale: TensorRef,
    shift: TensorRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    conv: ConvEntry,
    affine: Option<AffineEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ShortcutEntry {
    Identity { sample: Option<Vec<usize>> },
    Projection { block: BlockEntry },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NodeEntry {
    Conv2d {
        name: String,
        conv: ConvEntry,
    },
    Relu {
        name: String,
    },
    Pool {
        name: String,
        pool: PoolKind,
        window: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    ChannelAffine {
        name: String,
        affine: AffineEntry,
    },
    Dense {
        name: String,
        weights: TensorRef,
        bias: TensorRef,
    },
    Flatten {
        name: String,
    },
    ChannelSample {
        name: String,
        indices: Vec<usize>,
    },
    Bottleneck {
        name: String,
        conv1: BlockEntry,
        conv2: BlockEntry,
        conv3: BlockEntry,
        shortcut: ShortcutEntry,
        post_add_relu: bool,
    },
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn put(&mut self, values: &[f32], shape: Vec<usize>, layout: &str) -> TensorRef {
        let offset = self.bytes.len() as u64;
        self.bytes.reserve(values.len() * 4);
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef {
            dtype: "f32".into(),
            shape,
            layout: layout.into(),
            blob_offset: offset,
            blob_len: values.len() as u64 * 4,
        }
    }

    fn conv(&mut self, c: &Conv2D) -> ConvEntry {
        ConvEntry {
            stride: c.params.stride,
            padding: c.params.padding,
            kernel: self.put(c.kernel.data(), c.kernel.shape().to_vec(), "hwio"),
            bias: c.bias.as_ref().map(|b| self.put(b, vec![b.len()], "o")),
        }
    }

    fn affine(&mut self, a: &ChannelAffine) -> AffineEntry {
        AffineEntry {
            scale: self.put(&a.scale, vec![a.scale.len()], "o"),
            shift: self.put(&a.shift, vec![a.shift.len()], "o"),
        }
    }

    fn block(&mut self, b: &ConvBlock) -> BlockEntry {
        BlockEntry {
            conv: self.conv(&b.conv),
            affine: b.affine.as_ref().map(|a| self.affine(a)),
        }
    }

    fn node(&mut self, node: &Node) -> NodeEntry {
        match node {
            Node::Layer(Layer { name, spec }) => {
                let name = name.clone();
                match spec {
                    LayerSpec::Conv2D(c) => NodeEntry::Conv2d {
                        name,
                        conv: self.conv(c),
                    },
                    LayerSpec::Relu => NodeEntry::Relu { name },
                    LayerSpec::Pool(p) => NodeEntry::Pool {
                        name,
                        pool: p.kind,
                        window: p.window,
                        stride: p.stride,
                        pad: p.pad,
                    },
                    LayerSpec::ChannelAffine(a) => NodeEntry::ChannelAffine {
                        name,
                        affine: self.affine(a),
                    },
                    LayerSpec::Dense(d) => NodeEntry::Dense {
                        name,
                        weights: self.put(
                            d.weights.data(),
                            vec![d.weights.rows(), d.weights.cols()],
                            "oi",
                        ),
                        bias: self.put(&d.bias, vec![d.bias.len()], "o"),
                    },
                    LayerSpec::Flatten => NodeEntry::Flatten { name },
                    LayerSpec::ChannelSample(idx) => NodeEntry::ChannelSample {
                        name,
                        indices: idx.clone(),
                    },
                }
            }
            Node::Unit(u) => NodeEntry::Bottleneck {
                name: u.name.clone(),
                conv1: self.block(&u.conv1),
                conv2: self.block(&u.conv2),
                conv3: self.block(&u.conv3),
                shortcut: match &u.shortcut {
                    Shortcut::Identity { sample } => ShortcutEntry::Identity {
                        sample: sample.clone(),
                    },
                    Shortcut::Projection(b) => ShortcutEntry::Projection {
                        block: self.block(b),
                    },
                },
                post_add_relu: u.post_add_relu,
            },
        }
    }
}

/// Blob file that accompanies a manifest path: same stem, `.bin` extension.
fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and the sibling `.bin` blob. Output bytes are
/// a pure function of the graph and the file name.
pub fn save_model(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let violations = validate_graph(graph);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut blob = BlobWriter::default();
    let nodes = graph
        .nodes
        .iter()
        .map(|n| serde_json::to_value(blob.node(n)).expect("manifest nodes serialize"))
        .collect();
    let blob_path = blob_path_for(path);
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Argument(format!("bad model path {}", path.display())))?
        .to_string();
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        name: graph.name.clone(),
        input_shape: graph.input_shape,
        blob: blob_name,
        blob_len: blob.bytes.len() as u64,
        blob_crc32: crc32fast::hash(&blob.bytes),
        metadata: graph.metadata.clone(),
        nodes,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_path, &blob.bytes).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn read(&self, node: &str, r: &TensorRef, layout: &str, rank: usize) -> Result<Vec<f32>> {
        let bad = |message: String| -> Error {
            LoadError::ShapeInconsistency {
                node: node.to_string(),
                message,
            }
            .into()
        };
        if r.dtype != "f32" {
            return Err(bad(format!("unsupported dtype `{}`", r.dtype)));
        }
        if r.layout != layout {
            return Err(bad(format!(
                "expected layout `{layout}`, found `{}`",
                r.layout
            )));
        }
        if r.shape.len() != rank {
            return Err(bad(format!(
                "expected a rank-{rank} tensor, found shape {:?}",
                r.shape
            )));
        }
        let count: usize = r.shape.iter().product();
        if r.blob_len != count as u64 * 4 {
            return Err(bad(format!(
                "shape {:?} needs {count} floats but the blob holds {} bytes ({} floats)",
                r.shape,
                r.blob_len,
                r.blob_len as f64 / 4.0
            )));
        }
        let end = r.blob_offset.checked_add(r.blob_len);
        if end.is_none_or(|e| e > self.bytes.len() as u64) {
            return Err(bad(format!(
                "range {}+{} exceeds the {}-byte blob",
                r.blob_offset,
                r.blob_len,
                self.bytes.len()
            )));
        }
        let start = r.blob_offset as usize;
        Ok(self.bytes[start..start + r.blob_len as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn vector(&self, node: &str, r: &TensorRef) -> Result<Vec<f32>> {
        self.read(node, r, "o", 1)
    }

    fn conv(&self, node: &str, e: &ConvEntry) -> Result<Conv2D> {
        let data = self.read(node, &e.kernel, "hwio", 4)?;
        let s = &e.kernel.shape;
        let kernel = Tensor4::new(s[0], s[1], s[2], s[3], data).map_err(|err| {
            LoadError::ShapeInconsistency {
                node: node.into(),
                message: err.to_string(),
            }
        })?;
        Ok(Conv2D {
            kernel,
            bias: e.bias.as_ref().map(|b| self.vector(node, b)).transpose()?,
            params: ConvParams {
                stride: e.stride,
                padding: e.padding,
            },
        })
    }

    fn affine(&self, node: &str, e: &AffineEntry) -> Result<ChannelAffine> {
        Ok(ChannelAffine {
            scale: self.vector(node, &e.scale)?,
            shift: self.vector(node, &e.shift)?,
        })
    }

    fn block(&self, node: &str, e: &BlockEntry) -> Result<ConvBlock> {
        Ok(ConvBlock {
            conv: self.conv(node, &e.conv)?,
            affine: e
                .affine
                .as_ref()
                .map(|a| self.affine(node, a))
                .transpose()?,
        })
    }

    fn node(&self, entry: NodeEntry) -> Result<Node> {
        Ok(match entry {
            NodeEntry::Conv2d { name, conv } => {
                let c = self.conv(&name, &conv)?;
                Node::Layer(Layer::new(name, LayerSpec::Conv2D(c)))
            }
            NodeEntry::Relu { name } => Node::Layer(Layer::new(name, LayerSpec::Relu)),
            NodeEntry::Pool {
                name,
                pool,
                window,
                stride,
                pad,
            } => Node::Layer(Layer::new(
                name,
                LayerSpec::Pool(Pool {
                    kind: pool,
                    window,
                    stride,
                    pad,
                }),
            )),
            NodeEntry::ChannelAffine { name, affine } => {
                let a = self.affine(&name, &affine)?;
                Node::Layer(Layer::new(name, LayerSpec::ChannelAffine(a)))
            }
            NodeEntry::Dense {
                name,
                weights,
                bias,
            } => {
                let data = self.read(&name, &weights, "oi", 2)?;
                let w =
                    DenseMatrix::new(weights.shape[0], weights.shape[1], data).map_err(|err| {
                        LoadError::ShapeInconsistency {
                            node: name.clone(),
                            message: err.to_string(),
                        }
                    })?;
                let bias = self.vector(&name, &bias)?;
                Node::Layer(Layer::new(
                    name,
                    LayerSpec::Dense(Dense { weights: w, bias }),
                ))
            }
            NodeEntry::Flatten { name } => Node::Layer(Layer::new(name, LayerSpec::Flatten)),
            NodeEntry::ChannelSample { name, indices } => {
                Node::Layer(Layer::new(name, LayerSpec::ChannelSample(indices)))
            }
            NodeEntry::Bottleneck {
                name,
                conv1,
                conv2,
                conv3,
                shortcut,
                post_add_relu,
            } => Node::Unit(BottleneckUnit {
                conv1: self.block(&format!("{name}/conv1"), &conv1)?,
                conv2: self.block(&format!("{name}/conv2"), &conv2)?,
                conv3: self.block(&format!("{name}/conv3"), &conv3)?,
                shortcut: match shortcut {
                    ShortcutEntry::Identity { sample } => Shortcut::Identity { sample },
                    ShortcutEntry::Projection { block } => {
                        Shortcut::Projection(self.block(&format!("{name}/shortcut"), &block)?)
                    }
                },
                post_add_relu,
                name,
            }),
        })
    }
}

/// Reads a manifest and its blob, verifies the checksum and every tensor
/// shape, and validates the resulting graph.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Graph> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| LoadError::Malformed(e.to_string()))?;
    if manifest.format != MODEL_FORMAT {
        return Err(
            LoadError::Malformed(format!("unexpected format `{}`", manifest.format)).into(),
        );
    }
    if manifest.version != FORMAT_VERSION {
        return Err(
            LoadError::Malformed(format!("unsupported version {}", manifest.version)).into(),
        );
    }
    for node in &manifest.nodes {
        let kind = node.get("kind").and_then(|k| k.as_str()).unwrap_or("");
        if !KNOWN_KINDS.contains(&kind) {
            return Err(LoadError::UnknownLayerKind(kind.to_string()).into());
        }
    }

    let blob_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    if !blob_path.is_file() {
        return Err(LoadError::MissingBlob(blob_path).into());
    }
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let actual = crc32fast::hash(&bytes);
    if actual != manifest.blob_crc32 {
        return Err(LoadError::ChecksumMismatch {
            expected: manifest.blob_crc32,
            actual,
        }
        .into());
    }
    if bytes.len() as u64 != manifest.blob_len {
        return Err(LoadError::Malformed(format!(
            "manifest declares a {}-byte blob, file has {} bytes",
            manifest.blob_len,
            bytes.len()
        ))
        .into());
    }

    let reader = BlobReader { bytes: &bytes };
    let mut graph = Graph::new(manifest.name, manifest.input_shape);
    graph.metadata = manifest.metadata;
    for value in manifest.nodes {
        let entry: NodeEntry =
            serde_json::from_value(value).map_err(|e| LoadError::Malformed(e.to_string()))?;
        graph.nodes.push(reader.node(entry)?);
    }
    let violations = validate_graph(&graph);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for g in [fixtures::tiny_cnn(4), fixtures::mini_resnet(4)] {
            let p = dir.path().join(format!("{}.json", g.name));
            save_model(&g, &p).unwrap();
            let back = load_model(&p).unwrap();
            assert_eq!(back, g);
        }
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = fixtures::mini_resnet(2);
        let a = dir.path().join("a/m.json");
        let b = dir.path().join("b/m.json");
        save_model(&g, &a).unwrap();
        save_model(&g, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(
            fs::read(a.with_extension("bin")).unwrap(),
            fs::read(b.with_extension("bin")).unwrap()
        );
    }

    #[test]
    fn empty_graph_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        let g = Graph::new("e", [2, 2, 1]);
        assert!(matches!(save_model(&g, &p), Err(Error::Validation(_))));
        assert!(!p.exists());
    }

    fn tamper(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        f(&mut v);
        fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    }

    #[test]
    fn off_by_one_blob_is_shape_inconsistency() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = Graph::new("one", [5, 5, 4]);
        g.push_layer(
            "c",
            LayerSpec::Conv2D(Conv2D {
                kernel: Tensor4::from_fn(3, 3, 4, 8, |a, b, i, o| (a + b + i + o) as f32),
                bias: None,
                params: ConvParams::default(),
            }),
        );
        let p = dir.path().join("one.json");
        save_model(&g, &p).unwrap();
        // Drop the last float from the blob and fix up the bookkeeping.
        let bin = p.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(287 * 4);
        fs::write(&bin, &bytes).unwrap();
        let crc = crc32fast::hash(&bytes);
        tamper(&p, |v| {
            v["blob_len"] = (287 * 4).into();
            v["blob_crc32"] = crc.into();
            v["nodes"][0]["conv"]["kernel"]["blob_len"] = (287 * 4).into();
        });
        assert!(matches!(
            load_model(&p),
            Err(Error::Load(LoadError::ShapeInconsistency { .. }))
        ));
    }

    #[test]
    fn distinct_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let g = fixtures::tiny_cnn(1);
        let p = dir.path().join("t.json");
        save_model(&g, &p).unwrap();

        let bin = p.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_model(&p),
            Err(Error::Load(LoadError::ChecksumMismatch { .. }))
        ));

        fs::remove_file(&bin).unwrap();
        assert!(matches!(
            load_model(&p),
            Err(Error::Load(LoadError::MissingBlob(_)))
        ));

        save_model(&g, &p).unwrap();
        tamper(&p, |v| v["nodes"][1]["kind"] = "softmax".into());
        assert!(matches!(
            load_model(&p),
            Err(Error::Load(LoadError::UnknownLayerKind(k))) if k == "softmax"
        ));
    }
}
