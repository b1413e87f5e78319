//! Inference networks for every hidden variable and the incomplete θ
//! networks used at prediction time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureDims, VideoDoc};
use crate::diffcore::tape::softplus;
use crate::diffcore::{Activation, MlpNet, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

type HeadBuilder<'a> = dyn FnMut(&mut ParamStore, &str, usize, usize, Activation) -> Result<MlpNet> + 'a;

/// Store tag of the variational networks.
pub const VARIATIONAL_TAG: u32 = 1;

/// Positive floor added to every scale and Beta-parameter head.
pub const HEAD_FLOOR: f64 = 1e-6;

/// Initial value of the φ scale heads.
pub const PHI_SCALE_INIT: f64 = 0.1;

/// Mean normalized bag-of-words vectors over a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub transcript_mean: Vec<f64>,
    pub comment_mean: Vec<f64>,
}

impl CorpusStats {
    pub fn from_docs(docs: &[VideoDoc], v: usize) -> Self {
        let mut t = vec![0.0; v];
        let mut c = vec![0.0; v];
        let (mut nt, mut nc) = (0usize, 0usize);
        for d in docs {
            if let Some(tr) = d.transcript.as_deref().filter(|t| !t.is_empty()) {
                add_normalized(&mut t, tr);
                nt += 1;
            }
            if !d.comments.is_empty() {
                add_normalized(&mut c, &d.comments);
                nc += 1;
            }
        }
        for (x, n) in [(&mut t, nt), (&mut c, nc)] {
            if n > 0 {
                x.iter_mut().for_each(|a| *a /= n as f64);
            }
        }
        Self {
            transcript_mean: t,
            comment_mean: c,
        }
    }

    fn transcript_row(&self) -> Tensor {
        Tensor::row(self.transcript_mean.clone())
    }

    fn comment_row(&self) -> Tensor {
        Tensor::row(self.comment_mean.clone())
    }

    fn both_row(&self) -> Tensor {
        Tensor::row(self.transcript_mean.iter().chain(&self.comment_mean).copied().collect())
    }
}

fn add_normalized(acc: &mut [f64], words: &[usize]) {
    let inv = 1.0 / words.len() as f64;
    for &w in words {
        acc[w] += inv;
    }
}

/// Network inputs for a batch of documents.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEncoding {
    /// Raw transcript counts `[B, V]` (zero rows when absent).
    pub transcript_counts: Tensor,
    pub comment_counts: Tensor,
    pub transcript_bow: Tensor,
    pub comment_bow: Tensor,
    /// `[B, 1]` transcript presence.
    pub has_transcript: Tensor,
    pub f_img: Tensor,
    pub f_mot: Tensor,
    pub f_aud: Tensor,
    /// `[B, 1]`; zeros for unlabeled docs.
    pub labels: Tensor,
    pub labeled: bool,
}

impl BatchEncoding {
    pub fn new(docs: &[&VideoDoc], v: usize, dims: FeatureDims) -> Result<Self> {
        let b = docs.len();
        let mut tc = Tensor::zeros(b, v);
        let mut cc = Tensor::zeros(b, v);
        let mut has = Tensor::zeros(b, 1);
        let mut labels = Tensor::zeros(b, 1);
        let mut fi = Vec::with_capacity(b * dims.img);
        let mut fm = Vec::with_capacity(b * dims.mot);
        let mut fa = Vec::with_capacity(b * dims.aud);
        let mut labeled = true;
        for (i, d) in docs.iter().enumerate() {
            if d.dims() != dims {
                return Err(Error::Schema(format!(
                    "document {:?}: feature dimensions {:?}, expected {:?}",
                    d.id,
                    d.dims(),
                    dims
                )));
            }
            if let Some(t) = d.transcript.as_deref().filter(|t| !t.is_empty()) {
                has.set(i, 0, 1.0);
                for &w in t {
                    check_token(w, v, &d.id)?;
                    tc.row_slice_mut(i)[w] += 1.0;
                }
            }
            for &w in &d.comments {
                check_token(w, v, &d.id)?;
                cc.row_slice_mut(i)[w] += 1.0;
            }
            match d.label {
                Some(y) => labels.set(i, 0, y as f64),
                None => labeled = false,
            }
            fi.extend_from_slice(&d.f_img);
            fm.extend_from_slice(&d.f_mot);
            fa.extend_from_slice(&d.f_aud);
        }
        Ok(Self {
            transcript_bow: row_normalize(&tc),
            comment_bow: row_normalize(&cc),
            transcript_counts: tc,
            comment_counts: cc,
            has_transcript: has,
            f_img: Tensor::new(b, dims.img, fi)?,
            f_mot: Tensor::new(b, dims.mot, fm)?,
            f_aud: Tensor::new(b, dims.aud, fa)?,
            labels,
            labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> Tensor {
        hcat(&[&self.f_img, &self.f_mot, &self.f_aud])
    }

    /// `[t_bow, has_t, c_bow, f_img, f_mot, f_aud, y]`.
    pub fn complete_input(&self) -> Result<Tensor> {
        if !self.labeled {
            return Err(Error::Precondition("complete inference network needs labels".into()));
        }
        Ok(hcat(&[
            &self.transcript_bow,
            &self.has_transcript,
            &self.comment_bow,
            &self.f_img,
            &self.f_mot,
            &self.f_aud,
            &self.labels,
        ]))
    }

    /// `[t_bow, features]` for the with-transcript incomplete networks.
    pub fn incomplete_input_with_transcript(&self) -> Tensor {
        hcat(&[&self.transcript_bow, &self.f_img, &self.f_mot, &self.f_aud])
    }

    pub fn incomplete_input_without_transcript(&self) -> Tensor {
        self.features()
    }
}

fn check_token(w: usize, v: usize, id: &str) -> Result<()> {
    if w >= v {
        return Err(Error::Schema(format!("document {id:?}: token index {w} >= V = {v}")));
    }
    Ok(())
}

fn row_normalize(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_slice_mut(r);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    out
}

pub(crate) fn hcat(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    Tensor::new(rows, cols, data).expect("rows agree")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncompleteVariant {
    WithTranscript,
    WithoutTranscript,
}

impl IncompleteVariant {
    pub fn for_doc(doc: &VideoDoc) -> Self {
        if doc.has_transcript() {
            Self::WithTranscript
        } else {
            Self::WithoutTranscript
        }
    }
}

/// Location and scale networks of one LogNormal-distributed φ matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiNets {
    pub loc: MlpNet,
    pub scale: MlpNet,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub store: ParamStore,
    pub k: usize,
    pub v: usize,
    pub u: usize,
    pub dims: FeatureDims,
    pub theta_mean: MlpNet,
    pub theta_std: MlpNet,
    pub pi_t_a: MlpNet,
    pub pi_t_b: MlpNet,
    pub pi_a: MlpNet,
    pub pi_b: MlpNet,
    pub eta_a: MlpNet,
    pub eta_b: MlpNet,
    pub phi_r_t: PhiNets,
    pub phi_r: PhiNets,
    pub phi_s: PhiNets,
    /// Incomplete1/2: with transcript, no label or comments.
    pub inc_mean_t: MlpNet,
    pub inc_std_t: MlpNet,
    /// Incomplete3/4: features only.
    pub inc_mean: MlpNet,
    pub inc_std: MlpNet,
    pub stats: CorpusStats,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl VariationalState {
    /// Builds all networks. φ location heads start at `ln B` and scale heads
    /// at [`PHI_SCALE_INIT`]; incomplete networks copy the matching layers
    /// of the complete θ networks.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        v: usize,
        u: usize,
        dims: FeatureDims,
        hidden: &[usize],
        b_r: &Tensor,
        b_s: &Tensor,
        stats: CorpusStats,
        rng: &mut R,
    ) -> Result<Self> {
        if b_r.shape() != [k, v] || b_s.shape() != [k, u] {
            return Err(Error::Shape {
                op: "VariationalState::new",
                left: b_r.shape(),
                right: b_s.shape(),
            });
        }
        let mut store = ParamStore::new(VARIATIONAL_TAG);
        let f = dims.total();
        let complete_in = 2 * v + f + 2;
        let relu = Activation::Relu;
        let mut net = |store: &mut ParamStore, name: &str, input: usize, output: usize, out_act: Activation| {
            MlpNet::new(store, name, &widths(input, hidden, output), relu, out_act, rng)
        };
        let theta_mean = net(&mut store, "theta_mean", complete_in, k, Activation::Identity)?;
        let theta_std = net(&mut store, "theta_std", complete_in, k, Activation::Softplus)?.with_output_floor(HEAD_FLOOR);
        let beta_head = |store: &mut ParamStore, name: &str, input: usize, out: usize, net: &mut HeadBuilder| {
            net(store, name, input, out, Activation::Softplus).map(|n| n.with_output_floor(HEAD_FLOOR))
        };
        let pi_t_a = beta_head(&mut store, "pi_t_a", v, k, &mut net)?;
        let pi_t_b = beta_head(&mut store, "pi_t_b", v, k, &mut net)?;
        let pi_a = beta_head(&mut store, "pi_a", v, k, &mut net)?;
        let pi_b = beta_head(&mut store, "pi_b", v, k, &mut net)?;
        let eta_a = beta_head(&mut store, "eta_a", v, 1, &mut net)?;
        let eta_b = beta_head(&mut store, "eta_b", v, 1, &mut net)?;
        let mut phi = |store: &mut ParamStore, name: &str, input: usize, b: &Tensor| -> Result<PhiNets> {
            let (rows, cols) = (b.rows(), b.cols());
            let loc = net(store, &format!("{name}_loc"), input, rows * cols, Activation::Identity)?;
            let scale = net(store, &format!("{name}_scale"), input, rows * cols, Activation::Softplus)?
                .with_output_floor(HEAD_FLOOR);
            let last = loc.final_layer().clone();
            store.get_mut(last.weight).data_mut().iter_mut().for_each(|w| *w *= 0.01);
            let lb: Vec<f64> = b.data().iter().map(|x| x.max(1e-300).ln()).collect();
            *store.get_mut(last.bias) = Tensor::row(lb);
            let last = scale.final_layer().clone();
            store.get_mut(last.weight).data_mut().iter_mut().for_each(|w| *w *= 0.01);
            store.get_mut(last.bias).data_mut().fill(inverse_softplus(PHI_SCALE_INIT - HEAD_FLOOR));
            Ok(PhiNets { loc, scale, rows, cols })
        };
        let phi_r_t = phi(&mut store, "phi_r_t", v, b_r)?;
        let phi_r = phi(&mut store, "phi_r", v, b_r)?;
        let phi_s = phi(&mut store, "phi_s", 2 * v, b_s)?;
        let inc_mean_t = net(&mut store, "incomplete1", v + f, k, Activation::Identity)?;
        let inc_std_t = net(&mut store, "incomplete2", v + f, k, Activation::Softplus)?.with_output_floor(HEAD_FLOOR);
        let inc_mean = net(&mut store, "incomplete3", f.max(1), k, Activation::Identity)?;
        let inc_std = net(&mut store, "incomplete4", f.max(1), k, Activation::Softplus)?.with_output_floor(HEAD_FLOOR);
        let mut vs = Self {
            store,
            k,
            v,
            u,
            dims,
            theta_mean,
            theta_std,
            pi_t_a,
            pi_t_b,
            pi_a,
            pi_b,
            eta_a,
            eta_b,
            phi_r_t,
            phi_r,
            phi_s,
            inc_mean_t,
            inc_std_t,
            inc_mean,
            inc_std,
            stats,
        };
        vs.init_incomplete_from_complete();
        Ok(vs)
    }

    /// Copies every complete-network layer whose shape matches into the
    /// incomplete networks. The input projections keep their own weights.
    pub fn init_incomplete_from_complete(&mut self) -> usize {
        let src = self.store.clone();
        let mut copied = 0;
        for (dst, from) in [
            (&self.inc_mean_t, &self.theta_mean),
            (&self.inc_std_t, &self.theta_std),
            (&self.inc_mean, &self.theta_mean),
            (&self.inc_std, &self.theta_std),
        ] {
            copied += dst.copy_matching_layers(&mut self.store, from, &src);
        }
        copied
    }

    /// Nets of the incomplete variants, `(mean, std)`.
    pub fn incomplete_nets(&self, variant: IncompleteVariant) -> (&MlpNet, &MlpNet) {
        match variant {
            IncompleteVariant::WithTranscript => (&self.inc_mean_t, &self.inc_std_t),
            IncompleteVariant::WithoutTranscript => (&self.inc_mean, &self.inc_std),
        }
    }

    pub fn complete_nets(&self) -> [&MlpNet; 2] {
        [&self.theta_mean, &self.theta_std]
    }

    /// Every network updated by the E-step (all but the incomplete ones).
    pub fn e_step_nets(&self) -> Vec<&MlpNet> {
        vec![
            &self.theta_mean,
            &self.theta_std,
            &self.pi_t_a,
            &self.pi_t_b,
            &self.pi_a,
            &self.pi_b,
            &self.eta_a,
            &self.eta_b,
            &self.phi_r_t.loc,
            &self.phi_r_t.scale,
            &self.phi_r.loc,
            &self.phi_r.scale,
            &self.phi_s.loc,
            &self.phi_s.scale,
        ]
    }

    pub fn incomplete_all(&self) -> [&MlpNet; 4] {
        [&self.inc_mean_t, &self.inc_std_t, &self.inc_mean, &self.inc_std]
    }

    // ---- tape versions used by the objective ----

    pub fn theta_params_on(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Var, Var)> {
        let mu = self.theta_mean.forward(&self.store, tape, input, trainable)?;
        let sigma = self.theta_std.forward(&self.store, tape, input, trainable)?;
        Ok((mu, sigma))
    }

    pub fn incomplete_params_on(
        &self,
        tape: &mut Tape,
        input: Var,
        variant: IncompleteVariant,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let (m, s) = self.incomplete_nets(variant);
        Ok((
            m.forward(&self.store, tape, input, trainable)?,
            s.forward(&self.store, tape, input, trainable)?,
        ))
    }

    fn pair_on(&self, tape: &mut Tape, a: &MlpNet, b: &MlpNet, input: &Tensor, trainable: bool) -> Result<(Var, Var)> {
        let x = tape.constant(input.clone());
        Ok((
            a.forward(&self.store, tape, x, trainable)?,
            b.forward(&self.store, tape, x, trainable)?,
        ))
    }

    /// Beta parameters of π̃, `[1, K]` each, from transcript statistics only.
    pub fn pi_t_on(&self, tape: &mut Tape, trainable: bool) -> Result<(Var, Var)> {
        self.pair_on(tape, &self.pi_t_a, &self.pi_t_b, &self.stats.transcript_row(), trainable)
    }

    /// Beta parameters of π from comment statistics only.
    pub fn pi_on(&self, tape: &mut Tape, trainable: bool) -> Result<(Var, Var)> {
        self.pair_on(tape, &self.pi_a, &self.pi_b, &self.stats.comment_row(), trainable)
    }

    /// Beta parameters of η_d, `[B, 1]` each, from each doc's comments.
    pub fn eta_on(&self, tape: &mut Tape, comment_bow: &Tensor, trainable: bool) -> Result<(Var, Var)> {
        self.pair_on(tape, &self.eta_a, &self.eta_b, comment_bow, trainable)
    }

    fn phi_on(&self, tape: &mut Tape, nets: &PhiNets, input: &Tensor, trainable: bool) -> Result<(Var, Var)> {
        let (loc, scale) = self.pair_on(tape, &nets.loc, &nets.scale, input, trainable)?;
        Ok((
            tape.reshape(loc, nets.rows, nets.cols)?,
            tape.reshape(scale, nets.rows, nets.cols)?,
        ))
    }

    /// LogNormal `(loc, scale)` of φ̃^R, `[K, V]`.
    pub fn phi_r_t_on(&self, tape: &mut Tape, trainable: bool) -> Result<(Var, Var)> {
        self.phi_on(tape, &self.phi_r_t, &self.stats.transcript_row(), trainable)
    }

    pub fn phi_r_on(&self, tape: &mut Tape, trainable: bool) -> Result<(Var, Var)> {
        self.phi_on(tape, &self.phi_r, &self.stats.comment_row(), trainable)
    }

    /// LogNormal `(loc, scale)` of φ^S, `[K, U]`, from both statistics.
    pub fn phi_s_on(&self, tape: &mut Tape, trainable: bool) -> Result<(Var, Var)> {
        self.phi_on(tape, &self.phi_s, &self.stats.both_row(), trainable)
    }

    // ---- pure versions ----

    pub fn infer_theta_complete(&self, enc: &BatchEncoding) -> Result<(Tensor, Tensor)> {
        let x = enc.complete_input()?;
        Ok((
            self.theta_mean.apply(&self.store, &x)?,
            self.theta_std.apply(&self.store, &x)?,
        ))
    }

    /// `(μ', σ')` from the incomplete network matching `variant`. Every doc in
    /// the batch must match the variant's transcript presence.
    pub fn infer_theta_incomplete(&self, enc: &BatchEncoding, variant: IncompleteVariant) -> Result<(Tensor, Tensor)> {
        let want = f64::from(u8::from(variant == IncompleteVariant::WithTranscript));
        if enc.has_transcript.data().iter().any(|&h| h != want) {
            return Err(Error::Precondition(format!(
                "incomplete variant {variant:?} does not match the documents' transcript presence"
            )));
        }
        let x = match variant {
            IncompleteVariant::WithTranscript => enc.incomplete_input_with_transcript(),
            IncompleteVariant::WithoutTranscript => enc.incomplete_input_without_transcript(),
        };
        let (m, s) = self.incomplete_nets(variant);
        Ok((m.apply(&self.store, &x)?, s.apply(&self.store, &x)?))
    }

    /// `(a, b)` of q(π̃) per topic.
    pub fn infer_pi_t(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.stats.transcript_row();
        Ok((
            self.pi_t_a.apply(&self.store, &x)?.into_data(),
            self.pi_t_b.apply(&self.store, &x)?.into_data(),
        ))
    }

    pub fn infer_pi(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.stats.comment_row();
        Ok((
            self.pi_a.apply(&self.store, &x)?.into_data(),
            self.pi_b.apply(&self.store, &x)?.into_data(),
        ))
    }

    /// `(a, b)` of q(η_d) for each doc in the batch.
    pub fn infer_eta(&self, enc: &BatchEncoding) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            self.eta_a.apply(&self.store, &enc.comment_bow)?.into_data(),
            self.eta_b.apply(&self.store, &enc.comment_bow)?.into_data(),
        ))
    }

    fn phi_pure(&self, nets: &PhiNets, input: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            nets.loc.apply(&self.store, input)?.reshape(nets.rows, nets.cols)?,
            nets.scale.apply(&self.store, input)?.reshape(nets.rows, nets.cols)?,
        ))
    }

    /// LogNormal parameters `[(loc, scale)]` for φ̃^R, φ^R and φ^S.
    pub fn infer_phis(&self) -> Result<PhiParams> {
        Ok(PhiParams {
            phi_r_t: self.phi_pure(&self.phi_r_t, &self.stats.transcript_row())?,
            phi_r: self.phi_pure(&self.phi_r, &self.stats.comment_row())?,
            phi_s: self.phi_pure(&self.phi_s, &self.stats.both_row())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiParams {
    pub phi_r_t: (Tensor, Tensor),
    pub phi_r: (Tensor, Tensor),
    pub phi_s: (Tensor, Tensor),
}

/// Row-normalized LogNormal means `exp(loc + scale²/2)`.
pub fn lognormal_mean_rows(loc: &Tensor, scale: &Tensor) -> Tensor {
    let mut m = loc.zip_map(scale, "lognormal_mean", |l, s| l + 0.5 * s * s).expect("same shape");
    softmax_in_place(&mut m);
    m
}

/// Row-normalized LogNormal draw `exp(loc + scale·ε)`.
pub fn lognormal_sample_rows(loc: &Tensor, scale: &Tensor, eps: &Tensor) -> Tensor {
    let mut n = loc.clone();
    for ((x, s), e) in n.data_mut().iter_mut().zip(scale.data()).zip(eps.data()) {
        *x += s * e;
    }
    softmax_in_place(&mut n);
    n
}

fn softmax_in_place(m: &mut Tensor) {
    for r in 0..m.rows() {
        let row = m.row_slice_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
}

/// Mean of Beta(a, b).
pub fn beta_mean(a: f64, b: f64) -> f64 {
    a / (a + b)
}

/// softplus(0) + floor: the Beta parameter emitted by a zeroed head.
pub fn zeroed_head_value() -> f64 {
    softplus(0.0) + HEAD_FLOOR
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(t: Option<Vec<usize>>, c: Vec<usize>) -> VideoDoc {
        VideoDoc {
            id: "d".into(),
            transcript: t,
            comment_lengths: vec![c.len()],
            comments: c,
            f_img: vec![0.5],
            f_mot: vec![-1.0],
            f_aud: vec![2.0],
            label: Some(1),
            comment_flags: None,
        }
    }

    fn state(rng: &mut ChaCha8Rng) -> VariationalState {
        let dims = FeatureDims { img: 1, mot: 1, aud: 1 };
        let b_r = crate::pretrain::random_uniform_rows(3, 5, rng);
        let b_s = crate::pretrain::random_uniform_rows(3, 2, rng);
        let docs = [doc(Some(vec![0, 1]), vec![2, 3, 3]), doc(None, vec![4])];
        let stats = CorpusStats::from_docs(&docs, 5);
        VariationalState::new(3, 5, 2, dims, &[6, 6], &b_r, &b_s, stats, rng).unwrap()
    }

    #[test]
    fn phi_heads_start_near_prior_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b_r = crate::pretrain::random_uniform_rows(3, 5, &mut rng);
        let dims = FeatureDims { img: 1, mot: 1, aud: 1 };
        let b_s = crate::pretrain::random_uniform_rows(3, 2, &mut rng);
        let stats = CorpusStats::from_docs(&[doc(None, vec![1])], 5);
        let vs = VariationalState::new(3, 5, 2, dims, &[4], &b_r, &b_s, stats, &mut rng).unwrap();
        let p = vs.infer_phis().unwrap();
        for (l, b) in p.phi_r.0.data().iter().zip(b_r.data()) {
            assert!((l - b.ln()).abs() < 0.05);
        }
        for &s in p.phi_r.1.data() {
            assert!(s >= HEAD_FLOOR && (s - PHI_SCALE_INIT).abs() < 0.05);
        }
    }

    #[test]
    fn incomplete_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vs = state(&mut rng);
        let dims = vs.dims;
        let free = doc(None, vec![1]);
        let enc = BatchEncoding::new(&[&free], 5, dims).unwrap();
        assert!(vs.infer_theta_incomplete(&enc, IncompleteVariant::WithoutTranscript).is_ok());
        assert!(vs.infer_theta_incomplete(&enc, IncompleteVariant::WithTranscript).is_err());
    }

    #[test]
    fn pi_t_ignores_comments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vs = state(&mut rng);
        let before = vs.infer_pi_t().unwrap();
        vs.stats.comment_mean = vec![0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(vs.infer_pi_t().unwrap(), before);
        assert_ne!(vs.infer_pi().unwrap(), before);
    }

    #[test]
    fn zeroed_beta_heads_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vs = state(&mut rng);
        let mut store = vs.store.clone();
        vs.pi_a.zero_final_layer(&mut store);
        vs.pi_b.zero_final_layer(&mut store);
        let vs = VariationalState { store, ..vs };
        let (a, b) = vs.infer_pi().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, zeroed_head_value());
            assert_eq!(beta_mean(*x, *y), 0.5);
        }
    }
}
