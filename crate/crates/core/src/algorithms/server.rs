//! Server aggregation rules.

use crate::numkit::{mean, ParamVector};
use crate::quantizer::{decode, QuantizedVector};

use super::{AlgoError, ClientMessageGlomo, ServerState};

fn decoded_mean<'a, I>(messages: I) -> Result<ParamVector, AlgoError>
where
    I: IntoIterator<Item = &'a QuantizedVector>,
{
    let decoded = messages
        .into_iter()
        .map(decode)
        .collect::<Result<Vec<_>, _>>()?;
    if decoded.is_empty() {
        return Err(AlgoError::Invalid("no client messages to aggregate".into()));
    }
    Ok(mean(&decoded)?)
}

fn advance(state: &mut ServerState, next: ParamVector) {
    state.w_prev = std::mem::replace(&mut state.w_curr, next);
    state.k += 1;
}

/// `beta * drift + (1 - beta) * (u_prev + delta)` from already averaged
/// messages, or `drift` alone when there is no previous update.
pub fn glomo_direction(
    drift: &ParamVector,
    delta: &ParamVector,
    u_prev: Option<&ParamVector>,
    beta: f64,
) -> Result<ParamVector, AlgoError> {
    let Some(u_prev) = u_prev else {
        return Ok(drift.clone());
    };
    let mut u = drift.scale(beta);
    u.axpy_in_place(1.0 - beta, u_prev)?;
    u.axpy_in_place(1.0 - beta, delta)?;
    Ok(u)
}

/// Global-momentum aggregation. Returns the applied update `u_k`.
///
/// The first round has no previous update and uses the plain mean of the
/// drifts; later rounds mix in `u_{k-1}` and the mean of the deltas.
pub fn glomo_server_round(
    state: &mut ServerState,
    messages: &[ClientMessageGlomo],
    beta: f64,
) -> Result<ParamVector, AlgoError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(AlgoError::InvalidBeta(beta));
    }
    let drift = decoded_mean(messages.iter().map(|m| &m.q_drift))?;
    let u = match &state.u_prev {
        None => drift,
        Some(u_prev) => {
            let delta = decoded_mean(messages.iter().map(|m| &m.q_delta))?;
            glomo_direction(&drift, &delta, Some(u_prev), beta)?
        }
    };
    let next = state.w_curr.sub(&u)?;
    advance(state, next);
    state.u_prev = Some(u.clone());
    Ok(u)
}

/// `w_{k+1} = w_k + mean Q(w_{k,E} - w_k)`.
pub fn lomo_server_round(state: &mut ServerState, messages: &[QuantizedVector]) -> Result<ParamVector, AlgoError> {
    let step = decoded_mean(messages)?;
    let next = state.w_curr.add(&step)?;
    advance(state, next);
    Ok(step)
}

/// `w_{k+1} = w_k - mean Q(w_k - w_{k,E})`.
pub fn average_server_round(state: &mut ServerState, messages: &[QuantizedVector]) -> Result<ParamVector, AlgoError> {
    let step = decoded_mean(messages)?;
    let next = state.w_curr.sub(&step)?;
    advance(state, next);
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::stream;
    use crate::numkit::{Purpose, RngKey};
    use crate::quantizer::{quantize, QuantizerSpec};

    fn exact(v: &[f64]) -> QuantizedVector {
        let mut rng = stream(RngKey::new(0, 0, 0, Purpose::Quantizer));
        quantize(&ParamVector::from_vec(v.to_vec()), &QuantizerSpec::identity(), &mut rng).unwrap()
    }

    fn msg(drift: &[f64], delta: &[f64]) -> ClientMessageGlomo {
        ClientMessageGlomo::new(exact(drift), exact(delta))
    }

    #[test]
    fn first_round_uses_mean_drift() {
        let mut s = ServerState::new(ParamVector::from_vec(vec![1.0, 1.0]));
        let u = glomo_server_round(&mut s, &[msg(&[0.2, 0.4], &[9.0, 9.0]), msg(&[0.4, 0.0], &[9.0, 9.0])], 0.3).unwrap();
        assert_eq!(u.as_slice(), &[0.30000000000000004, 0.2]);
        assert_eq!(s.w_prev.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.k, 1);
    }

    #[test]
    fn later_rounds_blend_momentum() {
        let mut s = ServerState::new(ParamVector::from_vec(vec![0.0]));
        s.u_prev = Some(ParamVector::from_vec(vec![1.0]));
        s.k = 3;
        let beta = 0.25;
        let u = glomo_server_round(&mut s, &[msg(&[2.0], &[0.5]), msg(&[4.0], &[1.5])], beta).unwrap();
        let expected = beta * 3.0 + (1.0 - beta) * 1.0 + (1.0 - beta) * 1.0;
        assert!((u[0] - expected).abs() < 1e-15);
        assert!((s.w_curr[0] + expected).abs() < 1e-15);
        assert_eq!(s.u_prev.as_ref().unwrap()[0], u[0]);
    }

    #[test]
    fn beta_one_ignores_history() {
        let mut s = ServerState::new(ParamVector::from_vec(vec![0.5]));
        s.u_prev = Some(ParamVector::from_vec(vec![7.0]));
        let u = glomo_server_round(&mut s, &[msg(&[0.1], &[3.0])], 1.0).unwrap();
        assert_eq!(u[0], 0.1);
    }

    #[test]
    fn lomo_and_average_are_mirror_images() {
        let mut a = ServerState::new(ParamVector::from_vec(vec![1.0]));
        let mut b = a.clone();
        lomo_server_round(&mut a, &[exact(&[-0.25])]).unwrap();
        average_server_round(&mut b, &[exact(&[0.25])]).unwrap();
        assert_eq!(a.w_curr, b.w_curr);
    }

    #[test]
    fn empty_round_is_rejected() {
        let mut s = ServerState::new(ParamVector::zeros(1));
        assert!(average_server_round(&mut s, &[]).is_err());
    }
}
