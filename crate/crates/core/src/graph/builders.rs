//! The classification network (grouped-convolution residual net) and the
//! detection network (narrow YOLO-style net with the enhancement block).

use serde::{Deserialize, Serialize};

use super::layer::{GraphBuilder, LayerKind, NetGraph, GRAPH_INPUT};
use crate::ops::Padding;
use crate::sce::{DEFAULT_PYRAMID, DEFAULT_REDUCTION};

pub const ORIENTATION_CLASSES: usize = 4;
pub const SIGN_CLASSES: usize = 40;
pub const ANCHORS_PER_HEAD: usize = 3;
pub const GRNET_INPUT: usize = 224;
pub const GYNET_INPUT: usize = 416;

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Channel widths of the classifier's three resolution stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrnetWidths {
    pub stem: usize,
    pub mid: usize,
    pub wide: usize,
    pub classes: usize,
}

impl GrnetWidths {
    pub const FULL: GrnetWidths = GrnetWidths {
        stem: 64,
        mid: 256,
        wide: 512,
        classes: ORIENTATION_CLASSES,
    };

    /// Every stage width divided by `divisor` (4 gives the miniature used for
    /// desk-scale training).
    pub fn scaled(divisor: usize) -> Self {
        Self {
            stem: Self::FULL.stem / divisor,
            mid: Self::FULL.mid / divisor,
            wide: Self::FULL.wide / divisor,
            classes: ORIENTATION_CLASSES,
        }
    }
}

pub fn build_grnet() -> NetGraph {
    build_grnet_with(GrnetWidths::FULL)
}

fn basic_block(b: &mut GraphBuilder, id: &str, input: &str, c: usize) -> String {
    let g = gcd(c, c);
    let x = b.conv(format!("{id}.conv1"), input, c, 3, 1, g, false);
    let x = b.bn(format!("{id}.bn1"), &x);
    let x = b.relu(format!("{id}.relu1"), &x);
    let x = b.conv(format!("{id}.conv2"), &x, c, 3, 1, g, false);
    let x = b.bn(format!("{id}.bn2"), &x);
    let sum = b.push(format!("{id}.add"), LayerKind::Add, &[&x, input]);
    b.relu(id, &sum)
}

/// Two-branch downsampling unit: a stride-2 basic block path, and a
/// 2×2/2 max pool followed by conv+BN; the branches are summed.
fn downsample_block(b: &mut GraphBuilder, id: &str, input: &str, c_in: usize, c_out: usize) -> String {
    let g_in = gcd(c_in, c_out);
    let x = b.conv(format!("{id}.conv1"), input, c_out, 3, 2, g_in, false);
    let x = b.bn(format!("{id}.bn1"), &x);
    let x = b.relu(format!("{id}.relu1"), &x);
    let x = b.conv(format!("{id}.conv2"), &x, c_out, 3, 1, gcd(c_out, c_out), false);
    let main = b.bn(format!("{id}.bn2"), &x);
    let p = b.maxpool(format!("{id}.pool"), input, 2, 2, Padding::ZERO);
    let p = b.conv(format!("{id}.proj"), &p, c_out, 3, 1, g_in, false);
    let side = b.bn(format!("{id}.proj_bn"), &p);
    let sum = b.push(format!("{id}.add"), LayerKind::Add, &[&main, &side]);
    b.relu(id, &sum)
}

/// Classifier with every 3×3 conv grouped by `gcd(C_in, C_out)`.
pub fn build_grnet_with(w: GrnetWidths) -> NetGraph {
    let mut b = GraphBuilder::new();
    let x = b.conv("cbr.conv", GRAPH_INPUT, w.stem, 3, 1, gcd(3, w.stem), false);
    let x = b.bn("cbr.bn", &x);
    let x = b.relu("cbr", &x);
    let x = basic_block(&mut b, "bb1", &x, w.stem);
    let x = basic_block(&mut b, "bb2", &x, w.stem);
    let x = downsample_block(&mut b, "bdb1", &x, w.stem, w.mid);
    let x = basic_block(&mut b, "bb3", &x, w.mid);
    let x = downsample_block(&mut b, "bdb2", &x, w.mid, w.wide);
    let x = basic_block(&mut b, "bb4", &x, w.wide);
    let x = b.push("avgpool", LayerKind::GlobalAvgPool, &[&x]);
    let x = b.push(
        "fc",
        LayerKind::Fc {
            units: w.classes,
            bias: true,
        },
        &[&x],
    );
    b.push("softmax", LayerKind::Softmax, &[&x]);
    b.finish("grnet", &["softmax"])
}

/// Which halves of the enhancement block are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GynetVariant {
    /// Pyramid and channel weighting.
    Full,
    /// Block removed; S15 reads S13 directly.
    Baseline,
    /// Pyramid only.
    SpatialOnly,
    /// Channel weighting only, on the unpooled map.
    ChannelOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GynetConfig {
    pub variant: GynetVariant,
    pub classes: usize,
    pub anchors_per_head: usize,
    pub pyramid: Vec<usize>,
    pub reduction: usize,
    pub sce_bias: bool,
}

impl Default for GynetConfig {
    fn default() -> Self {
        Self {
            variant: GynetVariant::Full,
            classes: SIGN_CLASSES,
            anchors_per_head: ANCHORS_PER_HEAD,
            pyramid: DEFAULT_PYRAMID.to_vec(),
            reduction: DEFAULT_REDUCTION,
            sce_bias: true,
        }
    }
}

impl GynetConfig {
    pub fn variant(variant: GynetVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_per_head * (5 + self.classes)
    }
}

impl GynetVariant {
    pub const ALL: [GynetVariant; 4] = [
        GynetVariant::Full,
        GynetVariant::Baseline,
        GynetVariant::SpatialOnly,
        GynetVariant::ChannelOnly,
    ];

    /// Graph name, also the model name accepted on the command line.
    pub fn model_name(self) -> &'static str {
        match self {
            GynetVariant::Full => "gynet",
            GynetVariant::Baseline => "gynet-baseline",
            GynetVariant::SpatialOnly => "gynet-sib",
            GynetVariant::ChannelOnly => "gynet-cwb",
        }
    }
}

/// Model names understood by [`build_named`].
pub const MODEL_NAMES: [&str; 5] = ["grnet", "gynet", "gynet-baseline", "gynet-sib", "gynet-cwb"];

/// A named model with its default square input side.
pub fn build_named(name: &str) -> Option<(NetGraph, usize)> {
    if name == "grnet" {
        return Some((build_grnet(), GRNET_INPUT));
    }
    GynetVariant::ALL
        .into_iter()
        .find(|v| v.model_name() == name)
        .map(|v| (build_gynet_with(&GynetConfig::variant(v)), GYNET_INPUT))
}

pub fn build_gynet() -> NetGraph {
    build_gynet_with(&GynetConfig::default())
}

fn cbr(b: &mut GraphBuilder, id: &str, input: &str, filters: usize, kernel: usize) -> String {
    let x = b.conv(format!("{id}.conv"), input, filters, kernel, 1, 1, false);
    let x = b.bn(format!("{id}.bn"), &x);
    b.relu(id, &x)
}

/// Detection network; layer ids `s1`…`s22` name each row's output.
pub fn build_gynet_with(cfg: &GynetConfig) -> NetGraph {
    let mut b = GraphBuilder::new();
    let mut x = GRAPH_INPUT.to_string();
    let widths = [16, 32, 64, 64, 128, 256];
    for (i, &f) in widths.iter().enumerate() {
        let conv_row = 2 * i + 1;
        x = cbr(&mut b, &format!("s{conv_row}"), &x, f, 3);
        let (stride, padding) = if conv_row == 11 {
            (
                1,
                Padding {
                    top: 0,
                    bottom: 1,
                    left: 0,
                    right: 1,
                },
            )
        } else {
            (2, Padding::ZERO)
        };
        x = b.maxpool(format!("s{}", conv_row + 1), &x, 2, stride, padding);
    }
    let s13 = cbr(&mut b, "s13", &x, 512, 3);
    let enhanced = match cfg.variant {
        GynetVariant::Baseline => s13,
        GynetVariant::Full | GynetVariant::ChannelOnly => {
            let pyramid = if cfg.variant == GynetVariant::Full {
                cfg.pyramid.clone()
            } else {
                vec![1]
            };
            b.push(
                "s14",
                LayerKind::Sce {
                    pyramid,
                    reduction: cfg.reduction,
                    bias: cfg.sce_bias,
                },
                &[&s13],
            )
        }
        GynetVariant::SpatialOnly => {
            let mut branches = Vec::new();
            for &k in &cfg.pyramid {
                if k == 1 {
                    branches.push(s13.clone());
                } else {
                    branches.push(b.maxpool(format!("s14.m{k}"), &s13, k, 1, Padding::same(k)));
                }
            }
            let refs: Vec<&str> = branches.iter().map(String::as_str).collect();
            b.push("s14", LayerKind::Concat, &refs)
        }
    };
    let head_ch = cfg.head_channels();
    let head = |b: &mut GraphBuilder, id: &str, input: &str| {
        b.push(
            id,
            LayerKind::YoloHead {
                anchors: cfg.anchors_per_head,
                classes: cfg.classes,
            },
            &[input],
        )
    };

    let s15 = cbr(&mut b, "s15", &enhanced, 128, 1);
    let s16 = cbr(&mut b, "s16", &s15, 256, 1);
    let s17 = b.conv("s17", &s16, head_ch, 1, 1, 1, true);
    head(&mut b, "head13", &s17);

    let s18 = cbr(&mut b, "s18", &s15, 128, 1);
    let s19 = b.push("s19", LayerKind::Upsample2x, &[&s18]);
    let s20 = b.push("s20", LayerKind::Concat, &[&s19, "s9"]);
    let s21 = cbr(&mut b, "s21", &s20, 256, 3);
    let s22 = b.conv("s22", &s21, head_ch, 3, 1, 1, true);
    head(&mut b, "head26", &s22);

    b.finish(cfg.variant.model_name(), &["head13", "head26"])
}
