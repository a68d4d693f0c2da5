//! Values shared between integration targets.

#![allow(dead_code)]

use robopt::privacy_accountant::NoiseVariant;

/// `noise_variance` reference values from tests/oracles/privacy_oracle.py
/// (50-digit arithmetic).
pub const ORACLE: &[(NoiseVariant, f64, usize, usize, f64, f64, f64)] = &[
    (NoiseVariant::Accelerated, 1.0, 100, 4, 1.0, 0.5, 0.10631594901127084389),
    (NoiseVariant::Accelerated, 3.95284707521047, 10000, 69, 0.9, 1.0 / 3.0, 0.0095379483618220626466),
    (NoiseVariant::ChunkedGd, 0.2, 10000, 10, 0.1, 1.0 / 3.0, 0.0001980390453941313552),
    (NoiseVariant::ChunkedGd, 2.5, 731, 17, 0.5, 1e-5, 9.4827384582327340673),
    (NoiseVariant::Classic, 1.0, 100, 4, 1.0, 0.5, 0.35932373653330588732),
    (NoiseVariant::Classic, 2.0, 5500, 549, 0.9, 1.0 / 3.0, 0.27046443766567890552),
    (NoiseVariant::Classic, 0.5, 37, 1000, 0.25, 1e-3, 10344.951184197666617),
    (NoiseVariant::Sgd, 1.0, 100, 10000, 1.0, 0.5, 117.52043981870610927),
    (NoiseVariant::Sgd, 3.5, 400, 160000, 0.7, 1e-6, 218914.77894836906093),
];

/// `compose_advanced(0.9, delta, T)` from the same script.
pub const COMPOSED: &[(f64, usize, f64)] = &[
    (0.1, 1, 0.48710430993580880604),
    (0.1, 10, 0.48479984334530775208),
    (0.1, 1000, 0.48389651543907843668),
    (1e-3, 1, 0.46411994798676262854),
    (1e-3, 10, 0.46356685994396457056),
    (1e-3, 1000, 0.46334512512179832285),
];
