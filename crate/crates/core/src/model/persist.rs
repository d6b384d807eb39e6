//! Model bundles: a directory holding `manifest.txt` and one CTT file per tensor.
//!
//! The manifest is `key=value` text: format tag, version, model kind, the
//! layer spec, then `tensor.<name>=<file>` and `crc32.<name>=<hex>` per tensor.
//! Tensor files are written before the manifest, each through a rename.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{parse_key_values, read_text, write_text};
use crate::numerics::{ctt, RunningStats, Tensor};

use super::patient::PatientClassifier;
use super::slice::{ConvParams, SliceArchitecture, SliceModel};

pub const FORMAT_TAG: &str = "ctcaps-model";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";

fn write_bundle(dir: &Path, kind: &str, fields: &[(&str, String)], tensors: &[(String, &Tensor)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("format={FORMAT_TAG}\nversion={FORMAT_VERSION}\nkind={kind}\n");
    for (k, v) in fields {
        writeln!(manifest, "{k}={v}").unwrap();
    }
    for (name, tensor) in tensors {
        let file = format!("{name}.ctt");
        let bytes = ctt::encode(tensor);
        crate::io::write_atomic(&dir.join(&file), &bytes)?;
        writeln!(manifest, "tensor.{name}={file}").unwrap();
        writeln!(manifest, "crc32.{name}={:08x}", crc32fast::hash(&bytes)).unwrap();
    }
    write_text(&dir.join(MANIFEST), &manifest)
}

struct LoadedBundle {
    fields: HashMap<String, String>,
    tensors: HashMap<String, Tensor>,
    manifest: std::path::PathBuf,
}

impl LoadedBundle {
    fn read(dir: &Path, kind: &str) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let entries = parse_key_values(&read_text(&manifest)?, &manifest)?;
        let fields: HashMap<String, String> = entries.iter().cloned().collect();
        let get = |k: &str| fields.get(k).map(String::as_str);
        if get("format") != Some(FORMAT_TAG) {
            return Err(Error::format(&manifest, "not a model manifest"));
        }
        let version = get("version").unwrap_or("");
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::format(
                &manifest,
                format!("version mismatch: file has {version:?}, reader supports {FORMAT_VERSION}"),
            ));
        }
        if get("kind") != Some(kind) {
            return Err(Error::format(&manifest, format!("expected a {kind} model, found {:?}", get("kind"))));
        }
        let mut tensors = HashMap::new();
        for (key, file) in &entries {
            let Some(name) = key.strip_prefix("tensor.") else { continue };
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let expected = fields
                .get(&format!("crc32.{name}"))
                .ok_or_else(|| Error::format(&manifest, format!("no checksum for tensor {name}")))?;
            let actual = format!("{:08x}", crc32fast::hash(&bytes));
            if &actual != expected {
                return Err(Error::format(&path, format!("checksum mismatch: {actual} != {expected}")));
            }
            tensors.insert(name.to_string(), ctt::decode(&bytes, &path)?);
        }
        Ok(LoadedBundle { fields, tensors, manifest })
    }

    fn field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.fields
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&self.manifest, format!("missing or invalid field {key}")))
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.take(name)?;
        if t.shape() != shape {
            return Err(Error::format(
                &self.manifest,
                format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(&self.manifest, format!("missing tensor {name}")))
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl SliceModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let a = &self.arch;
        let fields = [
            ("input_size", a.input_size.to_string()),
            ("conv_channels", join(&a.conv_channels)),
            ("kernel", a.kernel.to_string()),
            ("capsule_types", a.capsule_types.to_string()),
            ("primary_dim", a.primary_dim.to_string()),
            ("feature_capsules", a.feature_capsules.to_string()),
            ("feature_dim", a.feature_dim.to_string()),
            ("class_capsules", a.class_capsules.to_string()),
            ("class_dim", a.class_dim.to_string()),
            ("routing_iterations", a.routing_iterations.to_string()),
            ("bn_momentum", format!("{:?}", self.bn_stats.momentum)),
            ("bn_epsilon", format!("{:?}", self.bn_stats.epsilon)),
        ];
        let mut tensors = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            tensors.push((format!("conv{}.kernels", i + 1), &c.kernels));
            tensors.push((format!("conv{}.bias", i + 1), &c.bias));
        }
        tensors.push(("bn.gamma".into(), &self.bn_gamma));
        tensors.push(("bn.beta".into(), &self.bn_beta));
        if let (Some(m), Some(v)) = (&self.bn_stats.mean, &self.bn_stats.var) {
            tensors.push(("bn.running_mean".into(), m));
            tensors.push(("bn.running_var".into(), v));
        }
        tensors.push(("caps_feature.weights".into(), &self.feature_weights));
        tensors.push(("caps_class.weights".into(), &self.class_weights));
        write_bundle(dir, "slice", &fields, &tensors)
    }

    /// Loads a bundle; any missing, truncated or corrupted piece fails the whole load.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut b = LoadedBundle::read(dir, "slice")?;
        let channels: Vec<usize> = b
            .fields
            .get("conv_channels")
            .map(|v| v.split(',').filter_map(|x| x.parse().ok()).collect())
            .unwrap_or_default();
        let conv_channels: [usize; 4] = channels
            .try_into()
            .map_err(|_| Error::format(&b.manifest, "conv_channels must list four widths"))?;
        let arch = SliceArchitecture {
            input_size: b.field("input_size")?,
            conv_channels,
            kernel: b.field("kernel")?,
            capsule_types: b.field("capsule_types")?,
            primary_dim: b.field("primary_dim")?,
            feature_capsules: b.field("feature_capsules")?,
            feature_dim: b.field("feature_dim")?,
            class_capsules: b.field("class_capsules")?,
            class_dim: b.field("class_dim")?,
            routing_iterations: b.field("routing_iterations")?,
        };
        arch.validate().map_err(|e| Error::format(&b.manifest, e.to_string()))?;
        let k = arch.kernel;
        let mut in_ch = 1;
        let mut convs = Vec::with_capacity(4);
        for (i, &out_ch) in arch.conv_channels.iter().enumerate() {
            convs.push(ConvParams {
                kernels: b.tensor(&format!("conv{}.kernels", i + 1), &[out_ch, in_ch, k, k])?,
                bias: b.tensor(&format!("conv{}.bias", i + 1), &[out_ch])?,
            });
            in_ch = out_ch;
        }
        let c2 = arch.conv_channels[1];
        let has_stats = b.tensors.contains_key("bn.running_mean");
        let bn_stats = RunningStats {
            mean: if has_stats { Some(b.tensor("bn.running_mean", &[c2])?) } else { None },
            var: if has_stats { Some(b.tensor("bn.running_var", &[c2])?) } else { None },
            momentum: b.field("bn_momentum")?,
            epsilon: b.field("bn_epsilon")?,
        };
        let model = SliceModel {
            convs: convs.try_into().expect("four convs"),
            bn_gamma: b.tensor("bn.gamma", &[c2])?,
            bn_beta: b.tensor("bn.beta", &[c2])?,
            bn_stats,
            feature_weights: b.tensor("caps_feature.weights", &arch.feature_spec().weight_shape())?,
            class_weights: b.tensor("caps_class.weights", &arch.class_spec().weight_shape())?,
            arch,
        };
        Ok(model)
    }
}

impl PatientClassifier {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let fields = [("layer_sizes", join(&super::patient::HEAD_SIZES))];
        let mut tensors = Vec::new();
        for (i, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            tensors.push((format!("dense{}.weights", i + 1), w));
            tensors.push((format!("dense{}.bias", i + 1), bias));
        }
        write_bundle(dir, "patient", &fields, &tensors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut b = LoadedBundle::read(dir, "patient")?;
        let sizes = super::patient::HEAD_SIZES;
        if b.fields.get("layer_sizes") != Some(&join(&sizes)) {
            return Err(Error::format(&b.manifest, format!("layer_sizes must be {}", join(&sizes))));
        }
        let mut head = PatientClassifier { weights: Vec::new(), biases: Vec::new() };
        for (i, w) in sizes.windows(2).enumerate() {
            head.weights.push(b.tensor(&format!("dense{}.weights", i + 1), &[w[0], w[1]])?);
            head.biases.push(b.tensor(&format!("dense{}.bias", i + 1), &[w[1]])?);
        }
        Ok(head)
    }
}
