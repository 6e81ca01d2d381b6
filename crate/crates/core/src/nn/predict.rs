use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::dataset::{
    build_input_cascaded, build_input_direct, build_input_joint, unpack_cascaded, unpack_direct,
    CascadedInput, Dataset, InputShape, NormStats, SampleKind, Tensor3,
};
use crate::ls::{ChannelEstimate, EstimateMethod};
use crate::pilots::UserPilots;
use crate::{CMatrix, CVector, Error, Result};

/// How received pilots are turned into a network input, and the channel
/// dimensions the output unpacks into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub kind: SampleKind,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub input_shape: InputShape,
    pub cascaded_input: CascadedInput,
}

impl InputLayout {
    pub fn of_dataset(ds: &Dataset) -> Self {
        InputLayout {
            kind: ds.kind,
            m: ds.config.m,
            l: ds.config.l,
            input_shape: ds.gen.input_shape,
            cascaded_input: ds.gen.cascaded_input,
        }
    }

    /// Input tensor for one user's received pilots.
    pub fn build_input(&self, rx: &UserPilots) -> Result<Tensor3<f64>> {
        match (self.kind, self.cascaded_input) {
            (SampleKind::Direct, _) => build_input_direct(&rx.y_direct, self.input_shape),
            (SampleKind::Cascaded, CascadedInput::PerElement) => build_input_cascaded(&rx.y_cascaded_cols),
            (SampleKind::Cascaded, CascadedInput::Joint) => {
                let y = rx
                    .y_cascaded_joint
                    .as_ref()
                    .ok_or_else(|| Error::config("network expects the joint phase-II signal"))?;
                build_input_joint(y, self.l)
            }
        }
    }

    fn label_len(&self) -> usize {
        match self.kind {
            SampleKind::Direct => 2 * self.m,
            SampleKind::Cascaded => 2 * self.m * self.l,
        }
    }
}

/// A trained network together with the preprocessing it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub net: Network<f32>,
    pub norm: NormStats,
    pub layout: InputLayout,
}

impl TrainedNet {
    pub fn new(net: Network<f32>, norm: NormStats, layout: InputLayout) -> Result<Self> {
        if net.output_dim() != layout.label_len() {
            return Err(Error::config(format!(
                "network outputs {} values but a {:?} label with M={}, L={} has {}",
                net.output_dim(),
                layout.kind,
                layout.m,
                layout.l,
                layout.label_len()
            )));
        }
        Ok(TrainedNet { net, norm, layout })
    }

    pub fn kind(&self) -> SampleKind {
        self.layout.kind
    }

    /// Raw label-space predictions for many input tensors.
    pub fn predict_tensors(&self, inputs: &[Tensor3<f64>]) -> Result<Vec<Vec<f64>>> {
        let dims = self.net.input_dims();
        let mut buf = Vec::new();
        let mut packed = Vec::with_capacity(inputs.len());
        for t in inputs {
            if (t.rows, t.cols) != dims {
                return Err(Error::config(format!(
                    "input is {}x{} but the network was trained on {}x{}",
                    t.rows, t.cols, dims.0, dims.1
                )));
            }
            self.norm.apply(t, &mut buf);
            packed.push(buf.iter().map(|&x| x as f32).collect::<Vec<f32>>());
        }
        let refs: Vec<&[f32]> = packed.iter().map(|v| v.as_slice()).collect();
        Ok(self
            .net
            .predict(&refs)?
            .into_iter()
            .map(|p| p.into_iter().map(f64::from).collect())
            .collect())
    }

    /// Label-space prediction for one user's pilots.
    pub fn predict_label(&self, rx: &UserPilots) -> Result<Vec<f64>> {
        let x = self.layout.build_input(rx)?;
        Ok(self.predict_tensors(std::slice::from_ref(&x))?.remove(0))
    }

    pub fn predict_direct(&self, rx: &UserPilots) -> Result<CVector> {
        if self.kind() != SampleKind::Direct {
            return Err(Error::config("this network estimates the cascaded channel"));
        }
        unpack_direct(&self.predict_label(rx)?)
    }

    pub fn predict_cascaded(&self, rx: &UserPilots) -> Result<CMatrix> {
        if self.kind() != SampleKind::Cascaded {
            return Err(Error::config("this network estimates the direct channel"));
        }
        unpack_cascaded(&self.predict_label(rx)?, self.layout.m, self.layout.l)
    }
}

/// Direct and cascaded estimate of one user from a pair of trained networks.
pub fn predict_channel(direct: &TrainedNet, cascaded: &TrainedNet, rx: &UserPilots) -> Result<ChannelEstimate> {
    if direct.layout.m != cascaded.layout.m {
        return Err(Error::config("direct and cascaded networks disagree on M"));
    }
    Ok(ChannelEstimate {
        h_direct_hat: direct.predict_direct(rx)?,
        g_hat: cascaded.predict_cascaded(rx)?,
        method: EstimateMethod::ChannelNet,
    })
}
