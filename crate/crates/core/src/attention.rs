//! Domain-conditioned channel attention.
//!
//! Each domain squeezes its feature maps into per-channel descriptors, reduces
//! them through its own affine branch, and expands them back through an
//! expansion layer shared by both domains. The resulting sigmoid gates rescale
//! the channels of that domain's feature maps.

use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Affine, Bound, ParamGroup, ParamStore};
use crate::tape::{Tape, Var};

/// Smallest width of the reduced descriptor.
pub const MIN_REDUCED: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Source,
    Target,
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Branch::Source),
            "target" => Ok(Branch::Target),
            other => Err(Error::InvalidArgument(alloc::format!("unknown branch {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionState {
    pub fc_s: Affine,
    pub fc_t: Affine,
    pub fc_shared: Affine,
    pub tau: usize,
    pub channels: usize,
}

/// Width of the reduced descriptor: `ceil(C/τ)`, but never below
/// [`MIN_REDUCED`].
pub fn reduced_width(channels: usize, tau: usize) -> usize {
    channels.div_ceil(tau.max(1)).max(MIN_REDUCED)
}

impl AttentionState {
    /// Random source branch and shared expansion; the target branch starts
    /// as an exact copy of the source branch.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        tau: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || tau == 0 {
            return Err(Error::InvalidArgument("channels and tau must be positive".into()));
        }
        let r = reduced_width(channels, tau);
        let group = ParamGroup::Backbone;
        let fc_s = Affine::new(store, &alloc::format!("{name}.fc_s"), channels, r, group, rng);
        let fc_t = Affine::zeros(store, &alloc::format!("{name}.fc_t"), channels, r, group);
        fc_t.copy_from(store, &fc_s);
        let fc_shared = Affine::new(store, &alloc::format!("{name}.fc_shared"), r, channels, group, rng);
        Ok(AttentionState {
            fc_s,
            fc_t,
            fc_shared,
            tau,
            channels,
        })
    }

    pub fn reduced(&self) -> usize {
        self.fc_s.output_dim
    }

    /// Copies the source branch into the target branch.
    pub fn synchronize(&self, store: &mut ParamStore) {
        self.fc_t.copy_from(store, &self.fc_s);
    }

    fn branch(&self, branch: Branch) -> &Affine {
        match branch {
            Branch::Source => &self.fc_s,
            Branch::Target => &self.fc_t,
        }
    }

    fn check_channels(&self, tape: &Tape, x: Var, op: &'static str) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() < 2 || s[1] != self.channels {
            return Err(Error::shape(
                op,
                alloc::format!("expected {} channels, got shape {:?}", self.channels, s),
            ));
        }
        Ok(())
    }
}

/// Per-sample, per-channel spatial mean: `N×C×H×W -> N×C`.
pub fn channel_descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.global_avg_pool(x)
}

/// `ω = sigmoid(FC(relu(FC_branch(d))))`.
pub fn attention_weights(
    tape: &mut Tape,
    bound: &Bound,
    d: Var,
    state: &AttentionState,
    branch: Branch,
) -> Result<Var> {
    state.check_channels(tape, d, "attention_weights")?;
    let reduced = state.branch(branch).forward(tape, bound, d)?;
    let reduced = tape.relu(reduced);
    let expanded = state.fc_shared.forward(tape, bound, reduced)?;
    Ok(tape.sigmoid(expanded))
}

/// Channel-wise rescaling `X̃[n,c] = ω[n,c]·X[n,c]`.
pub fn recalibrate(tape: &mut Tape, x: Var, weights: Var) -> Result<Var> {
    tape.channel_scale(x, weights)
}

/// Descriptor, gates and recalibration for one domain through one branch.
pub fn attend(tape: &mut Tape, bound: &Bound, x: Var, state: &AttentionState, branch: Branch) -> Result<(Var, Var)> {
    state.check_channels(tape, x, "attend")?;
    let d = channel_descriptor(tape, x)?;
    let w = attention_weights(tape, bound, d, state, branch)?;
    Ok((recalibrate(tape, x, w)?, w))
}

/// Source through the source branch, target through the target branch.
pub fn dcca_forward(
    tape: &mut Tape,
    bound: &Bound,
    xs: Var,
    xt: Var,
    state: &AttentionState,
) -> Result<(Var, Var)> {
    let (ss, st) = (tape.value(xs).shape(), tape.value(xt).shape());
    if ss.len() != 4 || st.len() != 4 || ss[1..] != st[1..] {
        return Err(Error::shape(
            "dcca_forward",
            alloc::format!("source {:?}, target {:?}", ss, st),
        ));
    }
    let (ys, _) = attend(tape, bound, xs, state, Branch::Source)?;
    let (yt, _) = attend(tape, bound, xt, state, Branch::Target)?;
    Ok((ys, yt))
}
