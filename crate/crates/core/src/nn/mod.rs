pub mod conv;
pub mod fir;
pub mod layers;
pub mod params;
pub mod resample;
