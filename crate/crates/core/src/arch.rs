//! Declarative network specifications and parameter accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiscale::NUM_SCALES;

pub const DEFAULT_KEEP_PROB: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vgg19Reduced,
    Resnet23,
    /// Hand-assembled layer list; not one of the published architectures.
    Custom,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Vgg19Reduced => "vgg19_reduced",
            Arch::Resnet23 => "resnet23",
            Arch::Custom => "custom",
        }
    }

    pub fn default_weight_decay(self) -> f64 {
        match self {
            Arch::Vgg19Reduced => 0.0005,
            Arch::Resnet23 => 0.0001,
            Arch::Custom => 0.0,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg19_reduced" => Ok(Arch::Vgg19Reduced),
            "resnet23" => Ok(Arch::Resnet23),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?} (expected vgg19_reduced or resnet23)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Segmenter,
    Classifier,
}

impl Role {
    pub fn num_classes(self) -> usize {
        match self {
            Role::Segmenter => 2,
            Role::Classifier => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Segmenter => "segmenter",
            Role::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmenter" => Ok(Role::Segmenter),
            "classifier" => Ok(Role::Classifier),
            other => Err(Error::InvalidArgument(format!(
                "unknown role {other:?} (expected segmenter or classifier)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kh: usize,
        kw: usize,
        out_channels: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        residual_from: Option<String>,
    },
    Maxpool,
    Dense {
        width: usize,
    },
    Dropout {
        keep_prob: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(name: &str, k: usize, out_channels: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv {
                kh: k,
                kw: k,
                out_channels,
                residual_from: None,
            },
        }
    }

    pub fn conv_res(name: &str, k: usize, out_channels: usize, from: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv {
                kh: k,
                kw: k,
                out_channels,
                residual_from: Some(from.to_string()),
            },
        }
    }

    pub fn maxpool(name: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Maxpool,
        }
    }

    pub fn dense(name: &str, width: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Dense { width },
        }
    }

    pub fn dropout(name: &str, keep_prob: f64) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Dropout { keep_prob },
        }
    }

    pub fn is_trunk(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Maxpool)
    }
}

/// Layer list plus derived facts. Trunk layers come first, then the per-pixel head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub role: Role,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub pool_factor: usize,
    pub trunk_channels: usize,
    pub head_widths: Vec<usize>,
    pub weight_decay: f64,
}

impl NetworkSpec {
    pub fn new(arch: Arch, role: Role) -> Self {
        let layers = match arch {
            Arch::Vgg19Reduced => vgg19_reduced_layers(role),
            Arch::Resnet23 => resnet23_layers(role),
            Arch::Custom => panic!("custom networks are built with NetworkSpec::custom"),
        };
        Self::from_layers(arch, role, layers, arch.default_weight_decay()).expect("built-in architecture is valid")
    }

    pub fn custom(role: Role, layers: Vec<LayerSpec>, weight_decay: f64) -> Result<Self> {
        Self::from_layers(Arch::Custom, role, layers, weight_decay)
    }

    fn from_layers(arch: Arch, role: Role, layers: Vec<LayerSpec>, weight_decay: f64) -> Result<Self> {
        let mut spec = NetworkSpec {
            arch,
            role,
            input_channels: 3,
            layers,
            pool_factor: 1,
            trunk_channels: 0,
            head_widths: Vec::new(),
            weight_decay,
        };
        let (pool_factor, trunk_channels, head_widths) = spec.derive()?;
        spec.pool_factor = pool_factor;
        spec.trunk_channels = trunk_channels;
        spec.head_widths = head_widths;
        Ok(spec)
    }

    /// Re-check a deserialized spec, including its derived fields.
    pub fn validate(&self) -> Result<()> {
        let (pool_factor, trunk_channels, head_widths) = self.derive()?;
        if self.input_channels != 3
            || pool_factor != self.pool_factor
            || trunk_channels != self.trunk_channels
            || head_widths != self.head_widths
        {
            return Err(Error::Config("network spec fields disagree with its layer list".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.role.num_classes()
    }

    pub fn trunk(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_trunk())
    }

    pub fn head(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| !l.is_trunk())
    }

    /// Residual links as (target conv, source layer) pairs.
    pub fn residual_links(&self) -> Vec<(&str, &str)> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Conv {
                    residual_from: Some(src),
                    ..
                } => Some((l.name.as_str(), src.as_str())),
                _ => None,
            })
            .collect()
    }

    /// Checks structural invariants; returns (pool_factor, trunk_channels, head_widths).
    fn derive(&self) -> Result<(usize, usize, Vec<usize>)> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        let mut names = std::collections::HashSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return bad(format!("duplicate layer name {}", l.name));
            }
        }
        let split = self.layers.iter().position(|l| !l.is_trunk()).unwrap_or(self.layers.len());
        if self.layers[split..].iter().any(|l| l.is_trunk()) {
            return bad("trunk layers must precede all head layers".into());
        }
        if !matches!(self.layers.first().map(|l| &l.kind), Some(LayerKind::Conv { .. })) {
            return bad("network must start with a convolution".into());
        }

        // (channels, pool level) of each trunk layer's output, by name
        let mut seen: Vec<(&str, usize, usize)> = Vec::new();
        let (mut channels, mut level) = (self.input_channels, 0usize);
        for l in &self.layers[..split] {
            match &l.kind {
                LayerKind::Conv {
                    kh,
                    kw,
                    out_channels,
                    residual_from,
                } => {
                    if kh % 2 == 0 || kw % 2 == 0 || *out_channels == 0 {
                        return bad(format!("{}: kernel must be odd and width positive", l.name));
                    }
                    if let Some(src) = residual_from {
                        let Some(&(_, sc, sl)) = seen.iter().find(|(n, _, _)| n == src) else {
                            return bad(format!("{}: shortcut source {src} is not an earlier trunk layer", l.name));
                        };
                        if sl != level || sc > *out_channels {
                            return bad(format!(
                                "{}: shortcut from {src} ({sc} channels, level {sl}) cannot feed {out_channels} channels at level {level}",
                                l.name
                            ));
                        }
                    }
                    channels = *out_channels;
                }
                LayerKind::Maxpool => level += 1,
                _ => unreachable!(),
            }
            seen.push((&l.name, channels, level));
        }

        let mut widths = Vec::new();
        let mut prev_dropout = true;
        for l in &self.layers[split..] {
            match &l.kind {
                LayerKind::Dense { width } => {
                    if *width == 0 {
                        return bad(format!("{}: dense width must be positive", l.name));
                    }
                    widths.push(*width);
                    prev_dropout = false;
                }
                LayerKind::Dropout { keep_prob } => {
                    if prev_dropout {
                        return bad(format!("{}: dropout must follow a dense layer", l.name));
                    }
                    if !(*keep_prob > 0.0 && *keep_prob <= 1.0) {
                        return bad(format!("{}: keep probability {keep_prob} outside (0, 1]", l.name));
                    }
                    prev_dropout = true;
                }
                _ => unreachable!(),
            }
        }
        if !matches!(self.layers.last().map(|l| &l.kind), Some(LayerKind::Dense { .. })) {
            return bad("network must end with a dense layer".into());
        }
        if widths.last() != Some(&self.num_classes()) {
            return bad(format!(
                "final head width {:?} does not match {} classes for the {}",
                widths.last(),
                self.num_classes(),
                self.role
            ));
        }
        Ok((1 << level, channels, widths))
    }
}

fn head(widths: &[usize], dropout_after: &[usize], role: Role) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let all: Vec<usize> = widths.iter().copied().chain([role.num_classes()]).collect();
    for (i, &w) in all.iter().enumerate() {
        out.push(LayerSpec::dense(&format!("FCL{i}"), w));
        if dropout_after.contains(&i) {
            out.push(LayerSpec::dropout(&format!("Dropout{i}"), DEFAULT_KEEP_PROB));
        }
    }
    out
}

fn vgg19_reduced_layers(role: Role) -> Vec<LayerSpec> {
    let mut l = vec![
        LayerSpec::conv("Conv0", 3, 64),
        LayerSpec::conv("Conv1", 3, 64),
        LayerSpec::maxpool("Maxpool0"),
        LayerSpec::conv("Conv2", 3, 128),
        LayerSpec::conv("Conv3", 3, 128),
        LayerSpec::maxpool("Maxpool1"),
    ];
    for i in 4..8 {
        l.push(LayerSpec::conv(&format!("Conv{i}"), 3, 256));
    }
    l.extend(head(&[1024, 1024, 256], &[0, 1], role));
    l
}

fn resnet23_layers(role: Role) -> Vec<LayerSpec> {
    let c = |i: usize, k, w| LayerSpec::conv(&format!("Conv{i}"), k, w);
    let r = |i: usize, k, w, from: &str| LayerSpec::conv_res(&format!("Conv{i}"), k, w, from);
    let mut l = vec![c(0, 7, 32), c(1, 7, 32), r(2, 7, 32, "Conv0"), LayerSpec::maxpool("Maxpool0")];
    l.extend([c(3, 3, 64), r(4, 3, 64, "Maxpool0"), c(5, 3, 64), r(6, 3, 64, "Conv4")]);
    l.extend([c(7, 3, 64), r(8, 3, 64, "Conv6"), c(9, 3, 128), r(10, 3, 128, "Conv8")]);
    l.push(LayerSpec::maxpool("Maxpool1"));
    l.push(c(11, 3, 128));
    l.push(r(12, 3, 128, "Maxpool1"));
    for i in (13..21).step_by(2) {
        l.push(c(i, 3, 128));
        l.push(r(i + 1, 3, 128, &format!("Conv{}", i - 1)));
    }
    // the dropout sits on FCL1's input
    l.extend(head(&[1024], &[0], role));
    l
}

/// Parameter count of one layer, split by kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub shape: String,
    pub weights: usize,
    pub biases: usize,
    pub batchnorm: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.batchnorm
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub layers: Vec<LayerCount>,
    pub total: usize,
    /// Trainable parameters only; batch-norm running statistics are not counted.
    pub trainable: usize,
}

/// Per-layer counts: conv `k*k*in*out + out`, dense `in*out + out`, batch norm `2*C`.
pub fn count_parameters(spec: &NetworkSpec) -> ParamReport {
    let mut layers = Vec::new();
    let mut channels = spec.input_channels;
    let mut features = NUM_SCALES * spec.trunk_channels;
    for l in &spec.layers {
        let count = match &l.kind {
            LayerKind::Conv { kh, kw, out_channels, .. } => {
                let c = LayerCount {
                    name: l.name.clone(),
                    shape: format!("{kh}x{kw}x{channels}x{out_channels}"),
                    weights: kh * kw * channels * out_channels,
                    biases: *out_channels,
                    batchnorm: 2 * out_channels,
                };
                channels = *out_channels;
                c
            }
            LayerKind::Dense { width } => {
                let c = LayerCount {
                    name: l.name.clone(),
                    shape: format!("{features}x{width}"),
                    weights: features * width,
                    biases: *width,
                    batchnorm: 0,
                };
                features = *width;
                c
            }
            LayerKind::Maxpool | LayerKind::Dropout { .. } => continue,
        };
        layers.push(count);
    }
    let total = layers.iter().map(LayerCount::total).sum();
    ParamReport {
        layers,
        trainable: total,
        total,
    }
}

/// Totals printed in the published architecture table.
pub fn published_total(arch: Arch, role: Role) -> Option<usize> {
    match (arch, role) {
        (Arch::Vgg19Reduced, Role::Segmenter) => Some(4_421_824),
        (Arch::Vgg19Reduced, Role::Classifier) => Some(4_423_104),
        (Arch::Resnet23, Role::Segmenter) => Some(2_143_618),
        (Arch::Resnet23, Role::Classifier) => Some(2_148_743),
        (Arch::Custom, _) => None,
    }
}

/// A counting convention: which parameter groups a tally includes, and the
/// input width assumed for the first dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Convention {
    pub conv_biases: bool,
    pub batchnorm: bool,
    pub dense_biases: bool,
    /// Count the first dense layer on one scale's trunk channels instead of all three.
    pub single_scale_head_input: bool,
}

impl Convention {
    pub const ENGINE: Convention = Convention {
        conv_biases: true,
        batchnorm: true,
        dense_biases: true,
        single_scale_head_input: false,
    };

    pub fn all() -> impl Iterator<Item = Convention> {
        (0..16u8).map(|b| Convention {
            conv_biases: b & 1 != 0,
            batchnorm: b & 2 != 0,
            dense_biases: b & 4 != 0,
            single_scale_head_input: b & 8 != 0,
        })
    }

    pub fn describe(&self) -> String {
        let yes = |b: bool| if b { "with" } else { "without" };
        format!(
            "{} conv biases, {} batch norm, {} dense biases, first dense input {}",
            yes(self.conv_biases),
            yes(self.batchnorm),
            yes(self.dense_biases),
            if self.single_scale_head_input { "single-scale" } else { "fused (3 scales)" }
        )
    }

    pub fn apply(&self, report: &ParamReport) -> usize {
        let first_dense = report.layers.iter().position(|l| l.batchnorm == 0);
        report
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let conv = l.batchnorm > 0;
                let mut weights = l.weights;
                if Some(i) == first_dense && self.single_scale_head_input {
                    weights /= NUM_SCALES;
                }
                let biases = match (conv, self.conv_biases, self.dense_biases) {
                    (true, true, _) | (false, _, true) => l.biases,
                    _ => 0,
                };
                weights + biases + if self.batchnorm { l.batchnorm } else { 0 }
            })
            .sum()
    }
}

/// Comparison of this engine's count against the published total.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub arch: Arch,
    pub role: Role,
    pub engine_total: usize,
    pub published: usize,
    /// `engine_total - published`
    pub delta: i64,
    /// Signed contribution of each parameter group to the delta.
    pub attribution: Vec<(String, i64)>,
    pub best_convention: Convention,
    pub best_total: usize,
    /// Residual left after applying the best convention.
    pub residual: i64,
    pub residual_fraction: f64,
}

pub fn audit(spec: &NetworkSpec) -> Option<AuditReport> {
    let published = published_total(spec.arch, spec.role)?;
    let report = count_parameters(spec);
    let engine_total = report.total;
    let best = Convention::all()
        .min_by_key(|c| (c.apply(&report) as i64 - published as i64).unsigned_abs())
        .expect("non-empty");
    let best_total = best.apply(&report);

    let sum = |f: &dyn Fn(&LayerCount) -> usize| report.layers.iter().map(f).sum::<usize>() as i64;
    let conv_biases = sum(&|l| if l.batchnorm > 0 { l.biases } else { 0 });
    let dense_biases = sum(&|l| if l.batchnorm == 0 { l.biases } else { 0 });
    let bn = sum(&|l| l.batchnorm);
    let full = Convention::ENGINE.apply(&report) as i64;
    let single = Convention {
        single_scale_head_input: true,
        ..Convention::ENGINE
    }
    .apply(&report) as i64;
    let mut attribution = Vec::new();
    for (name, excluded, amount) in [
        ("conv biases", !best.conv_biases, conv_biases),
        ("batch norm gamma/beta", !best.batchnorm, bn),
        ("dense biases", !best.dense_biases, dense_biases),
        ("first dense layer sees 3 fused scales", best.single_scale_head_input, full - single),
    ] {
        if excluded && amount != 0 {
            attribution.push((name.to_string(), amount));
        }
    }
    let explained: i64 = attribution.iter().map(|(_, a)| a).sum();
    let delta = engine_total as i64 - published as i64;
    let residual = best_total as i64 - published as i64;
    attribution.push(("unexplained".to_string(), delta - explained));
    debug_assert_eq!(delta - explained, residual);
    Some(AuditReport {
        arch: spec.arch,
        role: spec.role,
        engine_total,
        published,
        delta,
        attribution,
        best_convention: best,
        best_total,
        residual,
        residual_fraction: residual.unsigned_abs() as f64 / published as f64,
    })
}
