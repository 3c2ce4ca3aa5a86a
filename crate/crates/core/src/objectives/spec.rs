use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mapping::{LayerMapping, MappingStrategy};
use crate::transformer::ModelConfig;
use crate::{Error, Result};

/// Relation heads used by MiniLMv2 at reference scale.
pub const MINILMV2_RELATION_HEADS: usize = 48;

/// Teacher-layer offsets explored for attention transfer (`L`, `L-1`, `L-2`).
pub const EXPLORED_TEACHER_OFFSETS: [usize; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "od")]
    OutputDistribution,
    #[serde(rename = "hs")]
    HiddenState,
    #[serde(rename = "cosine-hs")]
    CosineHiddenState,
    #[serde(rename = "minilmv2")]
    MiniLmV2,
    #[serde(rename = "direct-minilm")]
    DirectMiniLm,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::OutputDistribution,
        Method::HiddenState,
        Method::CosineHiddenState,
        Method::MiniLmV2,
        Method::DirectMiniLm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::OutputDistribution => "od",
            Method::HiddenState => "hs",
            Method::CosineHiddenState => "cosine-hs",
            Method::MiniLmV2 => "minilmv2",
            Method::DirectMiniLm => "direct-minilm",
        }
    }

    /// Uses a layer mapping over hidden states.
    pub fn uses_mapping(self) -> bool {
        matches!(self, Method::HiddenState | Method::CosineHiddenState)
    }

    /// Transfers self-attention Q/K/V from one teacher layer.
    pub fn is_attention(self) -> bool {
        matches!(self, Method::MiniLmV2 | Method::DirectMiniLm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown method {s:?}")))
    }
}

/// Teacher layer counted from the top: `L`, `L-1`, `L-2`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TeacherLayer {
    pub offset: usize,
}

impl TeacherLayer {
    pub const LAST: TeacherLayer = TeacherLayer { offset: 0 };

    pub fn from_top(offset: usize) -> Self {
        Self { offset }
    }

    /// 1-based index for a teacher of `lt` layers.
    pub fn resolve(self, lt: usize) -> Result<usize> {
        if self.offset >= lt {
            return Err(Error::InvalidSpec(format!("teacher layer {self} does not exist in a {lt}-layer teacher")));
        }
        Ok(lt - self.offset)
    }

    pub fn is_explored(self) -> bool {
        EXPLORED_TEACHER_OFFSETS.contains(&self.offset)
    }
}

impl fmt::Display for TeacherLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            0 => f.write_str("L"),
            k => write!(f, "L-{k}"),
        }
    }
}

impl FromStr for TeacherLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("teacher layer {s:?} is not of the form \"L\" or \"L-k\""));
        match s.trim() {
            "L" => Ok(Self::LAST),
            t => {
                let k = t.strip_prefix("L-").ok_or_else(bad)?;
                k.parse().map(Self::from_top).map_err(|_| bad())
            }
        }
    }
}

impl TryFrom<String> for TeacherLayer {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TeacherLayer> for String {
    fn from(t: TeacherLayer) -> String {
        t.to_string()
    }
}

/// Positions supervised by output-distribution transfer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OdPositions {
    /// MLM-corrupted positions only.
    #[default]
    #[serde(rename = "masked")]
    Masked,
    /// Every non-padding position.
    #[serde(rename = "all")]
    All,
}

/// Initial value of learned projections.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionInit {
    /// Truncated normal, std 0.02.
    #[default]
    #[serde(rename = "random")]
    Random,
    /// Ones on the main diagonal.
    #[serde(rename = "identity")]
    Identity,
}

fn one() -> f64 {
    1.0
}

/// Which objective to optimize and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    pub method: Method,
    /// Required by `hs` and `cosine-hs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<MappingStrategy>,
    /// Required by `minilmv2` and `direct-minilm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_layer: Option<TeacherLayer>,
    #[serde(default = "one")]
    pub temperature: f64,
    /// `A_r`; defaults to 48 for MiniLMv2 and to the teacher's `A_h` for DirectMiniLM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_heads: Option<usize>,
    #[serde(default)]
    pub orthogonality_constraint: bool,
    #[serde(default)]
    pub od_positions: OdPositions,
    #[serde(default)]
    pub projection_init: ProjectionInit,
}

impl DistillSpec {
    fn base(method: Method) -> Self {
        Self {
            method,
            strategy: None,
            teacher_layer: None,
            temperature: 1.0,
            relation_heads: None,
            orthogonality_constraint: false,
            od_positions: OdPositions::Masked,
            projection_init: ProjectionInit::Random,
        }
    }

    pub fn od(temperature: f64) -> Self {
        Self { temperature, ..Self::base(Method::OutputDistribution) }
    }

    pub fn hs(strategy: MappingStrategy) -> Self {
        Self { strategy: Some(strategy), ..Self::base(Method::HiddenState) }
    }

    pub fn cosine_hs(strategy: MappingStrategy) -> Self {
        Self { strategy: Some(strategy), ..Self::base(Method::CosineHiddenState) }
    }

    pub fn minilmv2(teacher_layer: TeacherLayer, relation_heads: Option<usize>) -> Self {
        Self { teacher_layer: Some(teacher_layer), relation_heads, ..Self::base(Method::MiniLmV2) }
    }

    pub fn direct_minilm(teacher_layer: TeacherLayer, relation_heads: Option<usize>) -> Self {
        Self { teacher_layer: Some(teacher_layer), relation_heads, ..Self::base(Method::DirectMiniLm) }
    }

    /// `A_r` after defaults; `None` for methods without relation heads.
    pub fn resolved_relation_heads(&self, teacher: &ModelConfig) -> Option<usize> {
        match self.method {
            Method::MiniLmV2 => Some(self.relation_heads.unwrap_or(MINILMV2_RELATION_HEADS)),
            Method::DirectMiniLm => Some(self.relation_heads.unwrap_or(teacher.num_heads)),
            _ => None,
        }
    }

    /// Layer mapping for hidden-state methods.
    pub fn mapping(&self, student: &ModelConfig, teacher: &ModelConfig) -> Result<Option<LayerMapping>> {
        if !self.method.uses_mapping() {
            return Ok(None);
        }
        let strategy = self
            .strategy
            .ok_or_else(|| Error::InvalidSpec(format!("method {} needs a mapping strategy", self.method)))?;
        strategy.build(student.num_layers, teacher.num_layers).map(Some)
    }

    /// `(student layer, teacher layer)` for attention methods: the last student layer
    /// and the configured teacher layer.
    pub fn attention_layers(&self, student: &ModelConfig, teacher: &ModelConfig) -> Result<Option<(usize, usize)>> {
        if !self.method.is_attention() {
            return Ok(None);
        }
        let tl = self
            .teacher_layer
            .ok_or_else(|| Error::InvalidSpec(format!("method {} needs a teacher_layer", self.method)))?;
        Ok(Some((student.num_layers, tl.resolve(teacher.num_layers)?)))
    }

    /// Checks the spec against both architectures; returns non-fatal warnings.
    pub fn validate(&self, student: &ModelConfig, teacher: &ModelConfig) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidSpec(format!("temperature must be positive, got {}", self.temperature)));
        }
        if student.vocab_size != teacher.vocab_size && self.method == Method::OutputDistribution {
            return Err(Error::InvalidSpec(format!(
                "output transfer needs a shared vocabulary ({} vs {})",
                student.vocab_size, teacher.vocab_size
            )));
        }
        if !self.method.uses_mapping() && self.strategy.is_some() {
            return Err(Error::InvalidSpec(format!("method {} takes no mapping strategy", self.method)));
        }
        if !self.method.is_attention() && (self.teacher_layer.is_some() || self.relation_heads.is_some()) {
            return Err(Error::InvalidSpec(format!("method {} takes no teacher_layer or relation_heads", self.method)));
        }
        if self.orthogonality_constraint && self.method != Method::DirectMiniLm {
            return Err(Error::InvalidSpec("orthogonality_constraint applies to direct-minilm only".into()));
        }
        self.mapping(student, teacher)?;
        if self.method == Method::CosineHiddenState && student.hidden_size != teacher.hidden_size {
            return Err(Error::InvalidSpec(format!(
                "cosine hidden-state transfer needs equal hidden sizes (student {} vs teacher {})",
                student.hidden_size, teacher.hidden_size
            )));
        }
        if let Some(a_r) = self.resolved_relation_heads(teacher) {
            for (who, d) in [("student", student.hidden_size), ("teacher", teacher.hidden_size)] {
                if a_r == 0 || d % a_r != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "relation_heads A_r={a_r} does not divide the {who} hidden size {d}"
                    )));
                }
            }
            if self.orthogonality_constraint && student.hidden_size > teacher.hidden_size {
                return Err(Error::InvalidSpec(
                    "orthonormal projections need d_r of the student <= d_r of the teacher".into(),
                ));
            }
        }
        if let Some(tl) = self.teacher_layer {
            tl.resolve(teacher.num_layers)?;
            if !tl.is_explored() {
                warnings.push(format!("teacher_layer {tl} is outside the explored set {{L, L-1, L-2}}"));
            }
        }
        Ok(warnings)
    }
}
