//! Exact trainable-parameter accounting under two counting conventions.
//!
//! `WeightsOnly` counts conv kernels, linear weight matrices and layer-mixing
//! scalars; `All` counts every tensor entry. Head parameters are reported but
//! never included in `trainable_total`, which covers the upstream model only.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{PetError, Result};
use crate::param::{Component, ParamKind, ParamSpec, ParamStore};
use crate::strategy::PetStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    WeightsOnly,
    All,
}

impl Convention {
    pub fn counts(self, kind: ParamKind) -> bool {
        match self {
            Convention::All => true,
            Convention::WeightsOnly => matches!(kind, ParamKind::Weight | ParamKind::Mixing),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Convention::WeightsOnly => "weights-only",
            Convention::All => "all",
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Convention {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights-only" => Ok(Convention::WeightsOnly),
            "all" | "all-params" => Ok(Convention::All),
            other => Err(PetError::config(format!("unknown convention {other:?}"))),
        }
    }
}

/// Parameter declarations plus trainability; enough to count without
/// materializing any values.
#[derive(Clone, Debug, Default)]
pub struct ModelLayout {
    pub entries: Vec<(ParamSpec, bool)>,
}

impl ModelLayout {
    /// Layout of `config` injected with `strategy`, without allocating weights.
    pub fn plan(config: &BackboneConfig, strategy: &PetStrategy) -> Result<Self> {
        config.validate()?;
        let train_backbone = strategy.trains_backbone();
        let mut entries: Vec<(ParamSpec, bool)> = config.param_specs().into_iter().map(|s| (s, train_backbone)).collect();
        entries.extend(strategy.adapter_specs(config)?.into_iter().map(|s| (s, true)));
        Ok(Self { entries })
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store.iter().map(|(_, p)| (p.spec.clone(), p.tensor.trainable())).collect(),
        }
    }

    pub fn with_head(mut self, specs: impl IntoIterator<Item = ParamSpec>) -> Self {
        self.entries.extend(specs.into_iter().map(|s| (s, true)));
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub convention: Convention,
    /// Trainable upstream components, in model order.
    pub components: Vec<ComponentCount>,
    pub trainable_total: usize,
    pub head: usize,
    pub frozen_backbone: usize,
    pub backbone_total: usize,
    pub trainable_ratio: f64,
}

/// Counts `layout` under `convention`.
pub fn count_params(layout: &ModelLayout, convention: Convention) -> ParamReport {
    let mut order: Vec<Component> = Vec::new();
    let mut by_component: BTreeMap<Component, usize> = BTreeMap::new();
    let (mut head, mut frozen_backbone, mut backbone_total) = (0, 0, 0);
    for (spec, trainable) in &layout.entries {
        if !convention.counts(spec.kind) {
            continue;
        }
        let n = spec.numel();
        let comp = spec.component;
        if comp.is_backbone() {
            backbone_total += n;
            if !trainable {
                frozen_backbone += n;
            }
        }
        if comp.is_head() {
            head += n;
            continue;
        }
        if *trainable {
            if !by_component.contains_key(&comp) {
                order.push(comp);
            }
            *by_component.entry(comp).or_default() += n;
        }
    }
    let components: Vec<ComponentCount> = order
        .iter()
        .map(|c| ComponentCount {
            component: c.label(),
            count: by_component[c],
        })
        .collect();
    let trainable_total = components.iter().map(|c| c.count).sum();
    let mut report = ParamReport {
        convention,
        components,
        trainable_total,
        head,
        frozen_backbone,
        backbone_total,
        trainable_ratio: 0.0,
    };
    report.trainable_ratio = trainable_ratio(&report, backbone_total);
    report
}

/// `trainable_total / backbone_total`; 0 for an empty backbone.
pub fn trainable_ratio(report: &ParamReport, backbone_total: usize) -> f64 {
    if backbone_total == 0 {
        0.0
    } else {
        report.trainable_total as f64 / backbone_total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub convention: Convention,
    /// `a - b` per component label, over the union of both reports.
    pub components: Vec<(String, i64)>,
    pub trainable_total: i64,
    pub head: i64,
    pub backbone_total: i64,
}

impl ReportDelta {
    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|(_, d)| *d == 0) && self.trainable_total == 0 && self.head == 0 && self.backbone_total == 0
    }

    pub fn component(&self, label: &str) -> Option<i64> {
        self.components.iter().find(|(l, _)| l == label).map(|(_, d)| *d)
    }
}

/// Fieldwise `a - b`.
pub fn diff_reports(a: &ParamReport, b: &ParamReport) -> Result<ReportDelta> {
    if a.convention != b.convention {
        return Err(PetError::config(format!(
            "cannot diff a {} report against a {} report",
            a.convention, b.convention
        )));
    }
    let mut labels: Vec<&str> = a.components.iter().map(|c| c.component.as_str()).collect();
    for c in &b.components {
        if !labels.contains(&c.component.as_str()) {
            labels.push(&c.component);
        }
    }
    let lookup = |r: &ParamReport, l: &str| r.components.iter().find(|c| c.component == l).map_or(0, |c| c.count as i64);
    Ok(ReportDelta {
        convention: a.convention,
        components: labels.iter().map(|l| (l.to_string(), lookup(a, l) - lookup(b, l))).collect(),
        trainable_total: a.trainable_total as i64 - b.trainable_total as i64,
        head: a.head as i64 - b.head as i64,
        backbone_total: a.backbone_total as i64 - b.backbone_total as i64,
    })
}

/// Convenience: plan and count in one step.
pub fn count_strategy(config: &BackboneConfig, strategy: &PetStrategy, convention: Convention) -> Result<ParamReport> {
    Ok(count_params(&ModelLayout::plan(config, strategy)?, convention))
}

impl ParamReport {
    pub fn component(&self, label: &str) -> Option<usize> {
        self.components.iter().find(|c| c.component == label).map(|c| c.count)
    }

    /// Human-readable table.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = format!("{title} [{}]\n", self.convention);
        s.push_str(&format!("  {:<28} {:>14}\n", "component", "params"));
        for c in &self.components {
            s.push_str(&format!("  {:<28} {:>14}\n", c.component, c.count));
        }
        s.push_str(&format!("  {:<28} {:>14}\n", "trainable_total", self.trainable_total));
        s.push_str(&format!("  {:<28} {:>14}\n", "head (excluded)", self.head));
        s.push_str(&format!("  {:<28} {:>14}\n", "frozen_backbone", self.frozen_backbone));
        s.push_str(&format!("  {:<28} {:>14}\n", "backbone_total", self.backbone_total));
        s.push_str(&format!("  {:<28} {:>14.6}\n", "trainable_ratio", self.trainable_ratio));
        s
    }

    /// One `(component, convention, count)` record per row, including totals.
    pub fn records(&self) -> Vec<(String, Convention, usize)> {
        let mut rows: Vec<(String, Convention, usize)> = self
            .components
            .iter()
            .map(|c| (c.component.clone(), self.convention, c.count))
            .collect();
        rows.push(("trainable_total".into(), self.convention, self.trainable_total));
        rows.push(("head".into(), self.convention, self.head));
        rows.push(("frozen_backbone".into(), self.convention, self.frozen_backbone));
        rows.push(("backbone_total".into(), self.convention, self.backbone_total));
        rows
    }
}
