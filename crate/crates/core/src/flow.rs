//! Sending and receiving flow functions with per-mode caps.

use serde::{Deserialize, Serialize};

use crate::error::{FlownetError, Result};
use crate::network::Storage;

/// Fraction of capacity at which asymptotic families count as saturated.
pub const SATURATION: f64 = 1.0 - 1e-6;
/// Default upper bound on critical-density searches.
pub const DEFAULT_X_CLIP: f64 = 1e3;
const BISECT_TOL: f64 = 1e-10;

/// Shape of the sending flow `f_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SendingFamily {
    /// `min(v x, F)`.
    Ctm { v: f64, capacity: f64 },
    /// `F x / (eps + x)`.
    Clearing { capacity: f64, eps: f64 },
    /// `F (1 - exp(-rate x))`.
    ExpServer { capacity: f64, rate: f64 },
}

impl SendingFamily {
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match *self {
            SendingFamily::Ctm { v, capacity } => (v * x).min(capacity),
            SendingFamily::Clearing { capacity, eps } => {
                if x.is_infinite() {
                    capacity
                } else {
                    capacity * x / (eps + x)
                }
            }
            SendingFamily::ExpServer { capacity, rate } => capacity * (-(-rate * x).exp_m1()),
        }
    }

    /// `sup f`.
    pub fn capacity(&self) -> f64 {
        match *self {
            SendingFamily::Ctm { capacity, .. }
            | SendingFamily::Clearing { capacity, .. }
            | SendingFamily::ExpServer { capacity, .. } => capacity,
        }
    }

    /// True when `sup f` is attained at a finite density.
    pub fn attains_capacity(&self) -> bool {
        matches!(self, SendingFamily::Ctm { .. })
    }

    /// Smallest `x` with `f(x) >= level`, for `0 <= level < sup f`
    /// (or `level <= sup f` for attaining families).
    pub fn inverse(&self, level: f64) -> f64 {
        if level <= 0.0 {
            return 0.0;
        }
        match *self {
            SendingFamily::Ctm { v, capacity } => {
                if level > capacity {
                    f64::INFINITY
                } else {
                    level / v
                }
            }
            SendingFamily::Clearing { capacity, eps } => {
                if level >= capacity {
                    f64::INFINITY
                } else {
                    eps * level / (capacity - level)
                }
            }
            SendingFamily::ExpServer { capacity, rate } => {
                if level >= capacity {
                    f64::INFINITY
                } else {
                    -(-level / capacity).ln_1p() / rate
                }
            }
        }
    }

    /// Lipschitz constant of `f`.
    pub fn slope_bound(&self) -> f64 {
        match *self {
            SendingFamily::Ctm { v, .. } => v,
            SendingFamily::Clearing { capacity, eps } => capacity / eps,
            SendingFamily::ExpServer { capacity, rate } => capacity * rate,
        }
    }

    fn validate(&self, link: usize) -> Result<()> {
        let bad = |reason: String| Err(FlownetError::InvalidFlow { link, reason });
        let (cap, p, name) = match *self {
            SendingFamily::Ctm { v, capacity } => (capacity, v, "free-flow speed"),
            SendingFamily::Clearing { capacity, eps } => (capacity, eps, "epsilon"),
            SendingFamily::ExpServer { capacity, rate } => (capacity, rate, "rate"),
        };
        if !(cap.is_finite() && cap >= 0.0) {
            return bad(format!("capacity must be finite and nonnegative, got {cap}"));
        }
        if !(p.is_finite() && p > 0.0) {
            return bad(format!("{name} must be positive and finite, got {p}"));
        }
        Ok(())
    }
}

/// Nominal flow functions of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkFlow {
    pub sending: SendingFamily,
    /// Congestion-wave speed `w` of the receiving flow `w (x^max - x)`.
    pub wave_speed: f64,
    pub storage: Storage,
}

impl LinkFlow {
    pub fn ctm(v: f64, capacity: f64, w: f64, finite: bool) -> Self {
        let storage = if finite {
            Storage::Finite {
                jam: capacity / v + capacity / w,
            }
        } else {
            Storage::Infinite
        };
        LinkFlow {
            sending: SendingFamily::Ctm { v, capacity },
            wave_speed: w,
            storage,
        }
    }

    pub fn sending(&self, x: f64) -> f64 {
        self.sending.eval(x)
    }

    pub fn receiving(&self, x: f64) -> f64 {
        match self.storage {
            Storage::Infinite => f64::INFINITY,
            Storage::Finite { jam } => (self.wave_speed * (jam - x)).max(0.0),
        }
    }
}

/// A link's flow functions overlaid with per-mode caps `f̄_{s,k}`, `r̄_{s,k}`.
///
/// A cap of `+inf` leaves the nominal function untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModedFlow {
    pub base: LinkFlow,
    pub send_caps: Vec<f64>,
    pub recv_caps: Vec<f64>,
    #[serde(default = "default_x_clip")]
    pub x_clip: f64,
}

fn default_x_clip() -> f64 {
    DEFAULT_X_CLIP
}

impl ModedFlow {
    /// Undisrupted in every one of `modes` modes.
    pub fn nominal(base: LinkFlow, modes: usize) -> Self {
        ModedFlow {
            base,
            send_caps: vec![f64::INFINITY; modes],
            recv_caps: vec![f64::INFINITY; modes],
            x_clip: DEFAULT_X_CLIP,
        }
    }

    pub fn with_send_caps(mut self, caps: Vec<f64>) -> Self {
        self.send_caps = caps;
        self
    }

    pub fn with_recv_caps(mut self, caps: Vec<f64>) -> Self {
        self.recv_caps = caps;
        self
    }

    pub fn mode_count(&self) -> usize {
        self.send_caps.len()
    }

    /// Checks parameters; `link` is 1-based for messages.
    pub fn validate(&self, link: usize) -> Result<()> {
        self.base.sending.validate(link)?;
        let bad = |reason: String| Err(FlownetError::InvalidFlow { link, reason });
        if !(self.base.wave_speed.is_finite() && self.base.wave_speed > 0.0) {
            return bad(format!("wave speed must be positive, got {}", self.base.wave_speed));
        }
        if self.send_caps.len() != self.recv_caps.len() {
            return bad("sending and receiving caps cover different mode counts".into());
        }
        let sup_f = self.base.sending.capacity();
        let sup_r = self.base.receiving(0.0);
        for (s, (&fc, &rc)) in self.send_caps.iter().zip(&self.recv_caps).enumerate() {
            if fc.is_nan() || fc < 0.0 || (fc.is_finite() && fc > sup_f + 1e-12) {
                return bad(format!("sending cap {fc} in mode {} outside [0, {sup_f}]", s + 1));
            }
            if rc.is_nan() || rc < 0.0 || (rc.is_finite() && rc > sup_r + 1e-12) {
                return bad(format!("receiving cap {rc} in mode {} outside [0, {sup_r}]", s + 1));
            }
        }
        if self.x_clip.is_nan() || self.x_clip <= 0.0 {
            return bad("x_clip must be positive".into());
        }
        Ok(())
    }

    pub fn storage(&self) -> Storage {
        self.base.storage
    }

    /// `x^max`, infinite for infinite storage.
    pub fn jam(&self) -> f64 {
        self.base.storage.max_density()
    }

    /// `f_k(s, x)`.
    pub fn sending(&self, s: usize, x: f64) -> f64 {
        self.base.sending(x).min(self.send_caps[s])
    }

    /// `r_k(s, x)`; `+inf` on infinite-storage links without a receiving cap.
    pub fn receiving(&self, s: usize, x: f64) -> f64 {
        self.base.receiving(x).min(self.recv_caps[s])
    }

    /// `sup_x f_k(s, x)`.
    pub fn sup_sending(&self, s: usize) -> f64 {
        self.base.sending.capacity().min(self.send_caps[s])
    }

    /// Mode capacity `F_{s,k}` and critical density `x_k^c(s)`.
    pub fn mode_capacity(&self, s: usize) -> (f64, f64) {
        let cap = self.capacity_in(s);
        (cap, self.critical_for(cap))
    }

    fn capacity_in(&self, s: usize) -> f64 {
        let sup_f = self.sup_sending(s);
        let jam = self.jam();
        if jam.is_infinite() {
            return sup_f.min(self.recv_caps[s]);
        }
        // r never drops below f before f saturates: the sup is analytic.
        if let Some(x_sat) = self.saturation_point(sup_f) {
            if x_sat <= jam && self.receiving(s, x_sat) >= sup_f {
                return sup_f;
            }
        }
        let h = |x: f64| self.sending(s, x) - self.receiving(s, x);
        let (mut lo, mut hi) = (0.0, jam);
        if h(lo) >= 0.0 {
            return self.sending(s, lo).min(self.receiving(s, lo));
        }
        while hi - lo > BISECT_TOL {
            let mid = 0.5 * (lo + hi);
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let g = |x: f64| self.sending(s, x).min(self.receiving(s, x));
        g(lo).max(g(hi))
    }

    /// Smallest `x` where `f(s, x)` reaches `level` exactly, if attained.
    fn saturation_point(&self, level: f64) -> Option<f64> {
        if level < self.base.sending.capacity() || self.base.sending.attains_capacity() {
            Some(self.base.sending.inverse(level))
        } else {
            None
        }
    }

    fn critical_for(&self, cap: f64) -> f64 {
        if cap <= 0.0 {
            return 0.0;
        }
        let level = if self.base.sending.attains_capacity() {
            cap
        } else {
            SATURATION * cap
        };
        self.base.sending.inverse(level).min(self.x_clip)
    }

    /// Nominal capacity `F_k` (mode caps ignored).
    pub fn capacity(&self) -> f64 {
        let nominal = ModedFlow::nominal(self.base, 1);
        nominal.capacity_in(0)
    }

    /// Nominal critical density `x_k^c`.
    pub fn critical_density(&self) -> f64 {
        let nominal = ModedFlow::nominal(self.base, 1);
        nominal.mode_capacity(0).1
    }

    /// `F_k^max = max_s F_{s,k}`.
    pub fn max_capacity(&self) -> f64 {
        (0..self.mode_count())
            .map(|s| self.mode_capacity(s).0)
            .fold(0.0, f64::max)
    }

    /// Lipschitz bound on `f` and `r`.
    pub fn slope_bound(&self) -> f64 {
        let r = match self.storage() {
            Storage::Infinite => 0.0,
            Storage::Finite { .. } => self.base.wave_speed,
        };
        self.base.sending.slope_bound().max(r)
    }
}
