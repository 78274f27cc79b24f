//! Named scaling rules: policy and load parameters given as functions of the
//! system size N, e.g. "pow:0.7" for d = ceil(N^0.7) or "load:0.9" for
//! lambda = 0.9 N.

use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    /// Fixed value independent of N.
    Const(u64),
    /// ceil(N^alpha).
    Pow(f64),
    /// ceil(sqrt(N) * ln N).
    SqrtLog,
    /// ceil(sqrt(N) * ln N / omega) for a fixed divisor omega.
    LogDiv(f64),
    /// x * N (real-valued; used for arrival rates).
    Load(f64),
    /// N - beta * sqrt(N) (real-valued; critically loaded regime).
    Hw(f64),
}

/// Ceiling with a small backoff so values that are mathematically integral
/// but land epsilon above an integer in floating point do not get bumped up.
fn ceil_guard(x: f64) -> f64 {
    (x - 1e-9).ceil()
}

impl Rule {
    /// Real-valued evaluation. Integer-producing rules yield their ceiled
    /// value, so eval and eval_int agree where both apply.
    pub fn eval(&self, n: u32) -> f64 {
        let nf = f64::from(n);
        match self {
            Rule::Const(k) => *k as f64,
            Rule::Pow(alpha) => ceil_guard(nf.powf(*alpha)),
            Rule::SqrtLog => ceil_guard(nf.sqrt() * nf.ln()),
            Rule::LogDiv(omega) => ceil_guard(nf.sqrt() * nf.ln() / omega),
            Rule::Load(x) => x * nf,
            Rule::Hw(beta) => nf - beta * nf.sqrt(),
        }
    }

    /// Integer evaluation for counts (d, n, ell). Real-valued rules are
    /// accepted only when they land on a whole number.
    pub fn eval_int(&self, n: u32) -> Result<u64, String> {
        let v = self.eval(n);
        if !(v >= 0.0) {
            return Err(format!("rule {self} yields negative value {v} at N={n}"));
        }
        let r = v.round();
        if (r - v).abs() > 1e-9 {
            return Err(format!("rule {self} yields non-integer {v} at N={n}"));
        }
        Ok(r as u64)
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |what: &str| -> Result<f64, String> {
            arg.ok_or_else(|| format!("rule '{name}' needs an argument, e.g. '{name}:{what}'"))?
                .parse::<f64>()
                .map_err(|e| format!("bad numeric argument in rule '{s}': {e}"))
        };
        match name {
            "const" => {
                let v = num("5")?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(format!("const rule needs a nonnegative integer, got '{s}'"));
                }
                Ok(Rule::Const(v as u64))
            }
            "pow" => {
                let a = num("0.5")?;
                if !a.is_finite() || a < 0.0 {
                    return Err(format!("pow exponent must be finite and nonnegative, got '{s}'"));
                }
                Ok(Rule::Pow(a))
            }
            "sqrtlog" => {
                if arg.is_some() {
                    return Err("sqrtlog takes no argument".into());
                }
                Ok(Rule::SqrtLog)
            }
            "logdiv" => {
                let w = num("2")?;
                if !(w > 0.0) {
                    return Err(format!("logdiv divisor must be positive, got '{s}'"));
                }
                Ok(Rule::LogDiv(w))
            }
            "load" => {
                let x = num("0.9")?;
                if !x.is_finite() || x < 0.0 {
                    return Err(format!("load factor must be finite and nonnegative, got '{s}'"));
                }
                Ok(Rule::Load(x))
            }
            "hw" => {
                let b = num("1")?;
                if !b.is_finite() || b < 0.0 {
                    return Err(format!("hw slack must be finite and nonnegative, got '{s}'"));
                }
                Ok(Rule::Hw(b))
            }
            _ => Err(format!("unknown rule '{s}' (expected const/pow/sqrtlog/logdiv/load/hw)")),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Const(k) => write!(f, "const:{k}"),
            Rule::Pow(a) => write!(f, "pow:{a}"),
            Rule::SqrtLog => write!(f, "sqrtlog"),
            Rule::LogDiv(w) => write!(f, "logdiv:{w}"),
            Rule::Load(x) => write!(f, "load:{x}"),
            Rule::Hw(b) => write!(f, "hw:{b}"),
        }
    }
}
