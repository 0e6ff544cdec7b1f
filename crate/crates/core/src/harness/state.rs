//! Everything a run owns, and its mapping to checkpoint entries.

use super::checkpoint::{Checkpoint, EntryData};
use super::config::RunConfig;
use super::HarnessError;
use crate::classifier::WeightClassifier;
use crate::metalearn::{ClassifierState, LrSchedule, MetaLearner};
use crate::siren::{CoordGrid, SirenParams};
use crate::tensor::{OptimizerState, Tensor};

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub learner: MetaLearner<f32>,
    pub classifier: Option<ClassifierState<f32>>,
    pub height: usize,
    pub width: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed outer steps.
    pub step: usize,
}

fn put_opt(ck: &mut Checkpoint, prefix: &str, names: &[String], opt: &OptimizerState<f32>) {
    ck.insert_u64(format!("{prefix}.step"), &[opt.step]);
    for (i, name) in names.iter().enumerate() {
        if let (Some(m), Some(v)) = (opt.first_moment.get(i), opt.second_moment.get(i)) {
            ck.insert_f32(format!("{prefix}.m.{name}"), m.shape(), m.data());
            ck.insert_f32(format!("{prefix}.v.{name}"), v.shape(), v.data());
        }
    }
}

fn tensor(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<f32>, HarnessError> {
    let (s, data) = ck.f32(name)?;
    if s != shape {
        return Err(HarnessError::Checkpoint(format!("entry {name:?} has shape {s:?}, expected {shape:?}")));
    }
    Ok(Tensor::new(shape.to_vec(), data.to_vec())?)
}

fn get_opt(ck: &Checkpoint, prefix: &str, names: &[String], opt: &mut OptimizerState<f32>) -> Result<(), HarnessError> {
    let step = ck.u64s(&format!("{prefix}.step"))?;
    opt.step = *step.first().ok_or_else(|| HarnessError::Checkpoint(format!("{prefix}.step is empty")))?;
    for (i, name) in names.iter().enumerate() {
        if i < opt.first_moment.len() {
            let shape = opt.first_moment[i].shape().to_vec();
            opt.first_moment[i] = tensor(ck, &format!("{prefix}.m.{name}"), &shape)?;
            opt.second_moment[i] = tensor(ck, &format!("{prefix}.v.{name}"), &shape)?;
        }
    }
    Ok(())
}

impl TrainState {
    /// Fresh state for images of `height × width`.
    pub fn new(config: RunConfig, height: usize, width: usize) -> Result<Self, HarnessError> {
        config.validate()?;
        let learner = MetaLearner::new(config.siren, config.meta, config.seed)?;
        let classifier = if config.attach_classifier {
            let model = WeightClassifier::new(config.classifier_spec(), config.seed.wrapping_add(2))?;
            Some(ClassifierState::new(model, &config.meta))
        } else {
            None
        };
        Ok(Self { config, learner, classifier, height, width, epoch: 0, step: 0 })
    }

    pub fn grid(&self) -> CoordGrid<f32> {
        CoordGrid::new(self.height, self.width)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let text = self.config.render().into_bytes();
        ck.insert("config", vec![text.len()], EntryData::U8(text));
        ck.insert_u64("grid", &[self.height as u64, self.width as u64]);
        ck.insert_u64("progress", &[self.epoch as u64, self.step as u64]);
        let theta = &self.learner.theta;
        ck.insert_f32("theta", &[theta.len()], theta.flat());
        let alpha = self.learner.alpha.tensor();
        ck.insert_f32("alpha", alpha.shape(), alpha.data());
        put_opt(&mut ck, "opt.theta", &["theta".into()], &self.learner.theta_opt);
        put_opt(&mut ck, "opt.alpha", &["alpha".into()], &self.learner.alpha_opt);
        if let Some(c) = &self.classifier {
            let names = c.model.names();
            for (name, p) in names.iter().zip(c.model.params()) {
                ck.insert_f32(format!("psi.{name}"), p.shape(), p.data());
            }
            put_opt(&mut ck, "opt.psi", &names, &c.opt);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, HarnessError> {
        let text = std::str::from_utf8(ck.bytes("config")?).map_err(|_| HarnessError::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let grid = ck.u64s("grid")?;
        let progress = ck.u64s("progress")?;
        let ([h, w], [epoch, step]) = (grid, progress) else {
            return Err(HarnessError::Checkpoint("grid and progress must hold two values".into()));
        };
        let mut state = TrainState::new(config, *h as usize, *w as usize)?;
        state.epoch = *epoch as usize;
        state.step = *step as usize;

        let expected = state.config.siren.param_count();
        let (_, theta) = ck.f32("theta")?;
        if theta.len() != expected {
            return Err(HarnessError::ParamMismatch { expected, got: theta.len() });
        }
        state.learner.theta = SirenParams::from_flat(state.config.siren, theta.to_vec())?;
        let alpha_shape = state.learner.alpha.tensor().shape().to_vec();
        let alpha = tensor(ck, "alpha", &alpha_shape)?;
        state.learner.alpha = LrSchedule::from_tensor(alpha, state.config.meta.shared_alpha)?;
        get_opt(ck, "opt.theta", &["theta".into()], &mut state.learner.theta_opt)?;
        get_opt(ck, "opt.alpha", &["alpha".into()], &mut state.learner.alpha_opt)?;
        if let Some(c) = state.classifier.as_mut() {
            let names = c.model.names();
            let params = names
                .iter()
                .zip(c.model.params())
                .map(|(name, p)| tensor(ck, &format!("psi.{name}"), p.shape()))
                .collect::<Result<Vec<_>, _>>()?;
            c.model = WeightClassifier::from_params(*c.model.spec(), params)?;
            get_opt(ck, "opt.psi", &names, &mut c.opt)?;
        }
        Ok(state)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), HarnessError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
