//! `x^p` for nonnegative `x` with fast paths for the exponents that show up
//! in the standard scenarios (0, 1/2, 1, 3/2, 2, 3).

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Power {
    Zero,
    Half,
    One,
    ThreeHalves,
    Two,
    Three,
    General(f64),
}

impl Power {
    pub(crate) fn new(p: f64) -> Self {
        match p {
            p if p == 0.0 => Power::Zero,
            p if p == 0.5 => Power::Half,
            p if p == 1.0 => Power::One,
            p if p == 1.5 => Power::ThreeHalves,
            p if p == 2.0 => Power::Two,
            p if p == 3.0 => Power::Three,
            p => Power::General(p),
        }
    }

    /// `x^p`, with `0^0 = 1`.
    #[inline(always)]
    pub(crate) fn eval(self, x: f64) -> f64 {
        match self {
            Power::Zero => 1.0,
            Power::Half => x.sqrt(),
            Power::One => x,
            Power::ThreeHalves => x * x.sqrt(),
            Power::Two => x * x,
            Power::Three => x * x * x,
            Power::General(p) => {
                if x == 0.0 {
                    0.0
                } else {
                    x.powf(p)
                }
            }
        }
    }
}
