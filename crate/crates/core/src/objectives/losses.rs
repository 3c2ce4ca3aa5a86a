use super::mapping::LayerMapping;
use super::projection::{BoundProjections, ProjectionKey};
use super::spec::{DistillSpec, Method, OdPositions};
use crate::tensor::{concat_last, cosine_similarity_rows, mse, soft_cross_entropy, split_last};
use crate::transformer::{EncoderInput, ForwardTrace, ModelConfig, Qkv};
use crate::{Error, Result, Var};

fn total<'g>(terms: Vec<Var<'g>>) -> Result<Var<'g>> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::InvalidMapping("no mapped layer pairs".into()))?;
    it.try_fold(first, |acc, t| Ok(acc.add(t)?))
}

/// Flattens `[batch, seq, w]` to `[rows, w]`, keeping real positions only.
fn real_rows<'g>(x: Var<'g>, input: &EncoderInput) -> Result<Var<'g>> {
    let shape = x.shape();
    let w = *shape.last().expect("rank >= 1");
    let flat = x.reshape(&[input.batch() * input.seq_len(), w])?;
    if input.is_padded() {
        Ok(flat.gather_rows(&input.valid_rows())?)
    } else {
        Ok(flat)
    }
}

fn check_pair(s: &ForwardTrace<'_>, t: &ForwardTrace<'_>) -> Result<()> {
    let (a, b) = (&s.input, &t.input);
    if a.batch() != b.batch() || a.seq_len() != b.seq_len() || a.mask() != b.mask() {
        return Err(Error::TraceMismatch(format!(
            "student batch {}x{} vs teacher batch {}x{} (or differing masks)",
            a.batch(),
            a.seq_len(),
            b.batch(),
            b.seq_len()
        )));
    }
    Ok(())
}

/// `MSE(X·W, Y)` with `Y` detached; the shared path of hidden-state and
/// DirectMiniLM transfer.
pub fn projected_mse<'g>(student: Var<'g>, projection: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    Ok(mse(student.matmul(projection)?, target.detach())?)
}

/// `T² · CE(softmax(z^T/T), softmax(z^S/T))` over the given flattened positions.
pub fn od_loss<'g>(
    teacher_logits: Var<'g>,
    student_logits: Var<'g>,
    temperature: f64,
    rows: &[usize],
) -> Result<Var<'g>> {
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidSpec(format!("temperature must be positive, got {temperature}")));
    }
    let (ts, ss) = (teacher_logits.shape(), student_logits.shape());
    if ts != ss {
        return Err(Error::TraceMismatch(format!("teacher logits {ts:?} vs student logits {ss:?}")));
    }
    let v = *ss.last().expect("rank >= 1");
    let n = ss.iter().product::<usize>() / v;
    let t = teacher_logits.detach().reshape(&[n, v])?.gather_rows(rows)?;
    let s = student_logits.reshape(&[n, v])?.gather_rows(rows)?;
    let target = t.scale(1.0 / temperature).softmax()?.detach();
    let ce = soft_cross_entropy(target, s.scale(1.0 / temperature))?;
    Ok(ce.scale(temperature * temperature))
}

/// `Σ_i Σ_{j∈φ(i)} MSE(H_i^S W_i^j, H_j^T)`.
pub fn hs_loss<'g>(
    student: &ForwardTrace<'g>,
    teacher: &ForwardTrace<'g>,
    mapping: &LayerMapping,
    projections: &BoundProjections<'g>,
) -> Result<Var<'g>> {
    check_pair(student, teacher)?;
    check_mapping(student, teacher, mapping)?;
    let input = &student.input;
    let terms = mapping
        .pairs()
        .into_iter()
        .map(|(i, j)| {
            let w = projections.get(ProjectionKey::Hidden { student: i, teacher: j })?;
            projected_mse(real_rows(student.hidden(i)?, input)?, w, real_rows(teacher.hidden(j)?, input)?)
        })
        .collect::<Result<Vec<_>>>()?;
    total(terms)
}

fn check_mapping(s: &ForwardTrace<'_>, t: &ForwardTrace<'_>, m: &LayerMapping) -> Result<()> {
    if m.student_layers() != s.num_layers() || m.teacher_layers() != t.num_layers() {
        return Err(Error::TraceMismatch(format!(
            "mapping for {}->{} layers applied to {}->{} layer traces",
            m.teacher_layers(),
            m.student_layers(),
            t.num_layers(),
            s.num_layers()
        )));
    }
    Ok(())
}

/// Mean over mapped pairs and positions of `1 − cos(H_i^S row, H_j^T row)`.
pub fn cosine_hs_loss<'g>(
    student: &ForwardTrace<'g>,
    teacher: &ForwardTrace<'g>,
    mapping: &LayerMapping,
) -> Result<Var<'g>> {
    check_pair(student, teacher)?;
    check_mapping(student, teacher, mapping)?;
    let input = &student.input;
    let pairs = mapping.pairs();
    let terms = pairs
        .iter()
        .map(|&(i, j)| {
            let s = real_rows(student.hidden(i)?, input)?;
            let t = real_rows(teacher.hidden(j)?, input)?.detach();
            Ok(cosine_similarity_rows(s, t)?.sum())
        })
        .collect::<Result<Vec<_>>>()?;
    let count = (pairs.len() * input.valid_rows().len()) as f64;
    Ok(total(terms)?.scale(-1.0 / count).add_scalar(1.0))
}

/// Concatenates per-head matrices along features and re-splits into `A_r` slices.
pub fn concat_resplit<'g>(heads: &[Var<'g>], relation_heads: usize) -> Result<Vec<Var<'g>>> {
    let joined = concat_last(heads)?;
    let width = *joined.shape().last().expect("rank >= 1");
    if relation_heads == 0 || width % relation_heads != 0 {
        return Err(Error::InvalidSpec(format!("A_r={relation_heads} does not divide width {width}")));
    }
    Ok(split_last(joined, relation_heads)?)
}

/// `A·Aᵀ/√d_r` (plus an optional additive key mask), over the last two axes.
pub fn relation_logits<'g>(a: Var<'g>, key_bias: Option<Var<'g>>) -> Result<Var<'g>> {
    let d_r = *a.shape().last().expect("rank >= 1") as f64;
    let scores = a.bmm(a.transpose()?)?.scale(1.0 / d_r.sqrt());
    match key_bias {
        Some(b) => Ok(scores.add(b)?),
        None => Ok(scores),
    }
}

/// Row-softmax of the scaled Gram matrix.
pub fn relation_matrix<'g>(a: Var<'g>) -> Result<Var<'g>> {
    Ok(relation_logits(a, None)?.softmax()?)
}

fn relation_slices<'g>(trace: &ForwardTrace<'g>, layer: usize, qkv: Qkv, a_r: usize) -> Result<Vec<Var<'g>>> {
    concat_resplit(&trace.layer(layer)?.heads_of(qkv), a_r)
}

/// `Σ_α Σ_a CE(R^T_{α,j,a}, R^S_{α,i,a})`; each CE is a mean over real query rows.
pub fn minilmv2_loss<'g>(
    student: &ForwardTrace<'g>,
    teacher: &ForwardTrace<'g>,
    i: usize,
    j: usize,
    relation_heads: usize,
) -> Result<Var<'g>> {
    check_pair(student, teacher)?;
    let input = &student.input;
    let g = student.hidden(0)?.graph();
    let bias = input.is_padded().then(|| g.constant(&input.key_bias()));
    let mut terms = Vec::with_capacity(3 * relation_heads);
    for qkv in Qkv::ALL {
        let ss = relation_slices(student, i, qkv, relation_heads)?;
        let ts = relation_slices(teacher, j, qkv, relation_heads)?;
        for (s, t) in ss.into_iter().zip(ts) {
            let target = relation_logits(t.detach(), bias)?.softmax()?;
            let logits = relation_logits(s, bias)?;
            terms.push(soft_cross_entropy(real_rows(target, input)?, real_rows(logits, input)?)?);
        }
    }
    total(terms)
}

/// `Σ_α Σ_a MSE(A^S_{α,i,a} W_{α,a}, A^T_{α,j,a})`.
pub fn direct_minilm_loss<'g>(
    student: &ForwardTrace<'g>,
    teacher: &ForwardTrace<'g>,
    i: usize,
    j: usize,
    relation_heads: usize,
    projections: &BoundProjections<'g>,
) -> Result<Var<'g>> {
    check_pair(student, teacher)?;
    let input = &student.input;
    let mut terms = Vec::with_capacity(3 * relation_heads);
    for qkv in Qkv::ALL {
        let ss = relation_slices(student, i, qkv, relation_heads)?;
        let ts = relation_slices(teacher, j, qkv, relation_heads)?;
        for (a, (s, t)) in ss.into_iter().zip(ts).enumerate() {
            let w = projections.get(ProjectionKey::Relation { qkv, head: a + 1 })?;
            terms.push(projected_mse(real_rows(s, input)?, w, real_rows(t, input)?)?);
        }
    }
    total(terms)
}

/// `Σ_α Σ_a MSE(A^S A^Sᵀ, A^T A^Tᵀ)`: the orthonormal-projection limit of DirectMiniLM.
///
/// Padded keys are zeroed and padded query rows dropped before the mean.
pub fn gram_mse_loss<'g>(
    student: &ForwardTrace<'g>,
    teacher: &ForwardTrace<'g>,
    i: usize,
    j: usize,
    relation_heads: usize,
) -> Result<Var<'g>> {
    check_pair(student, teacher)?;
    let input = &student.input;
    let g = student.hidden(0)?.graph();
    let keep = input.is_padded().then(|| g.constant(&input.key_keep()));
    let gram = |a: Var<'g>| -> Result<Var<'g>> {
        let m = a.bmm(a.transpose()?)?;
        let m = match keep {
            Some(k) => m.mul(k)?,
            None => m,
        };
        real_rows(m, input)
    };
    let mut terms = Vec::with_capacity(3 * relation_heads);
    for qkv in Qkv::ALL {
        let ss = relation_slices(student, i, qkv, relation_heads)?;
        let ts = relation_slices(teacher, j, qkv, relation_heads)?;
        for (s, t) in ss.into_iter().zip(ts) {
            terms.push(mse(gram(s)?, gram(t.detach())?)?);
        }
    }
    total(terms)
}

/// A [`DistillSpec`] resolved against a student/teacher pair.
#[derive(Debug, Clone)]
pub struct Objective {
    pub method: Method,
    pub mapping: Option<LayerMapping>,
    /// `(i, j)` for attention methods.
    pub layers: Option<(usize, usize)>,
    pub relation_heads: Option<usize>,
    pub temperature: f64,
    pub od_positions: OdPositions,
}

impl Objective {
    pub fn new(spec: &DistillSpec, student: &ModelConfig, teacher: &ModelConfig) -> Result<Self> {
        for w in spec.validate(student, teacher)? {
            log::warn!("{w}");
        }
        Ok(Self {
            method: spec.method,
            mapping: spec.mapping(student, teacher)?,
            layers: spec.attention_layers(student, teacher)?,
            relation_heads: spec.resolved_relation_heads(teacher),
            temperature: spec.temperature,
            od_positions: spec.od_positions,
        })
    }

    /// Whether the student's output head has to be evaluated.
    pub fn needs_logits(&self) -> bool {
        self.method == Method::OutputDistribution
    }

    /// `od_rows` lists the flattened positions supervised by output transfer.
    pub fn loss<'g>(
        &self,
        student: &ForwardTrace<'g>,
        teacher: &ForwardTrace<'g>,
        projections: &BoundProjections<'g>,
        od_rows: &[usize],
    ) -> Result<Var<'g>> {
        let attention = || {
            let (i, j) = self.layers.expect("resolved attention layers");
            (i, j, self.relation_heads.expect("resolved relation heads"))
        };
        match self.method {
            Method::OutputDistribution => {
                check_pair(student, teacher)?;
                od_loss(teacher.logits()?, student.logits()?, self.temperature, od_rows)
            }
            Method::HiddenState => hs_loss(student, teacher, self.mapping.as_ref().expect("mapping"), projections),
            Method::CosineHiddenState => cosine_hs_loss(student, teacher, self.mapping.as_ref().expect("mapping")),
            Method::MiniLmV2 => {
                let (i, j, a) = attention();
                minilmv2_loss(student, teacher, i, j, a)
            }
            Method::DirectMiniLm => {
                let (i, j, a) = attention();
                direct_minilm_loss(student, teacher, i, j, a, projections)
            }
        }
    }
}
