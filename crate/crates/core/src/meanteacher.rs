//! Teacher/student pair, the exponential moving average update and the
//! model contract shared by both.

use ndarray::Array3;

use crate::datamodel::{is_buffer_key, ParamSnapshot};
use crate::{CbmtError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Train,
    Eval,
}

/// What the adaptation loop needs from a segmentation network.
///
/// `forward` maps `3 × H × W` images to `C × H × W` pre-sigmoid logits. In
/// train mode it records what `backward` needs; `backward` accumulates
/// parameter gradients from the gradient of the loss with respect to those
/// logits. `read_params` after `write_params(s)` returns `s`.
pub trait ModelAdapter<F: Scalar> {
    fn num_classes(&self) -> usize;
    fn mode(&self) -> ModelMode;
    fn set_mode(&mut self, mode: ModelMode);
    fn forward(&mut self, batch: &[&Array3<F>]) -> Result<Vec<Array3<F>>>;
    fn backward(&mut self, grad_logits: &[Array3<F>]) -> Result<()>;
    fn zero_grad(&mut self);
    fn read_params(&self) -> ParamSnapshot<F>;
    /// Gradients of the trainable entries, keyed like [`ModelAdapter::read_params`].
    fn gradients(&self) -> ParamSnapshot<F>;
    fn write_params(&mut self, snap: &ParamSnapshot<F>) -> Result<()>;
}

/// Teacher and student built from the same architecture.
#[derive(Clone, Debug)]
pub struct TeacherStudentPair<M> {
    pub teacher: M,
    pub student: M,
    pub lambda_ema: f64,
    /// Include normalization running statistics in the average.
    pub ema_buffers: bool,
    pub step: u64,
}

/// Builds a pair from `builder`, loading `source` into both models.
pub fn init_pair<F: Scalar, M: ModelAdapter<F>>(
    source: &ParamSnapshot<F>,
    builder: impl Fn() -> M,
    lambda_ema: f64,
    ema_buffers: bool,
) -> Result<TeacherStudentPair<M>> {
    if !(0.0..=1.0).contains(&lambda_ema) {
        return Err(CbmtError::config("lambda_ema", "lambda_ema out of [0,1]"));
    }
    let mut teacher = builder();
    let mut student = builder();
    teacher.read_params().check_compatible(source)?;
    teacher.write_params(source)?;
    student.write_params(source)?;
    teacher.set_mode(ModelMode::Eval);
    student.set_mode(ModelMode::Train);
    Ok(TeacherStudentPair {
        teacher,
        student,
        lambda_ema,
        ema_buffers,
        step: 0,
    })
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, elementwise.
pub fn ema_snapshot<F: Scalar>(
    teacher: &ParamSnapshot<F>,
    student: &ParamSnapshot<F>,
    lambda: f64,
    include_buffers: bool,
) -> Result<ParamSnapshot<F>> {
    teacher.check_compatible(student)?;
    let one_minus = F::lit(1.0 - lambda);
    let mut out = teacher.clone();
    for (key, t) in out.entries.iter_mut() {
        if !include_buffers && is_buffer_key(key) {
            continue;
        }
        let s = &student.entries[key];
        // t + (1 - lambda)(s - t): exact when s == t, lambda == 1 or lambda == 0
        if lambda == 0.0 {
            t.assign(s);
        } else {
            ndarray::Zip::from(t).and(s).for_each(|t, &s| {
                *t += one_minus * (s - *t);
            });
        }
    }
    if let Some(bad) = out.first_non_finite() {
        return Err(CbmtError::NonFinite {
            context: format!("teacher parameter {bad} after moving-average update"),
        });
    }
    out.step = teacher.step + 1;
    Ok(out)
}

impl<M> TeacherStudentPair<M> {
    /// Moves the teacher towards the student; the student is untouched.
    pub fn ema_update<F: Scalar>(&mut self) -> Result<()>
    where
        M: ModelAdapter<F>,
    {
        let t = self.teacher.read_params();
        let s = self.student.read_params();
        let next = ema_snapshot(&t, &s, self.lambda_ema, self.ema_buffers)?;
        self.teacher.write_params(&next)?;
        self.step += 1;
        Ok(())
    }
}
