use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Extractor,
    SelfAdversarial,
    Projection,
    Interactive,
    /// First prediction block; its output is the propagation/reconstruction tap.
    PredictionTrunk,
    PredictionHead,
    UnlabeledHead,
    Reconstruction,
    Discriminator,
}

impl Role {
    /// Roles trained by denoising-autoencoder pretraining.
    pub fn is_encoder_path(self) -> bool {
        matches!(
            self,
            Role::Extractor
                | Role::SelfAdversarial
                | Role::Projection
                | Role::Interactive
                | Role::PredictionTrunk
                | Role::Reconstruction
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

/// Flat owner of every learnable tensor and non-learnable buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: String, role: Role, value: Tensor) -> ParamId {
        self.params.push(Param { name, role, value });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn add_buffer(&mut self, name: String, value: Tensor) -> BufferId {
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub(crate) fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }


    pub(crate) fn buffers_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.buffers
    }
}
