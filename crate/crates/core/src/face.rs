use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Spectrum {
    #[serde(rename = "VIS")]
    Vis,
    #[serde(rename = "TH")]
    Th,
}

impl Spectrum {
    pub const ALL: [Spectrum; 2] = [Spectrum::Th, Spectrum::Vis];

    pub fn as_str(&self) -> &'static str {
        match self {
            Spectrum::Vis => "VIS",
            Spectrum::Th => "TH",
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Spectrum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VIS" => Ok(Spectrum::Vis),
            "TH" => Ok(Spectrum::Th),
            _ => Err(Error::Validation(format!("unknown spectrum `{s}`"))),
        }
    }
}

macro_rules! variations {
    ($($variant:ident => $code:literal, $kind:literal, $name:literal;)*) => {
        /// The 21 capture conditions of the paired visible/thermal face set.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Variation {
            $(#[serde(rename = $code)] $variant,)*
        }

        impl Variation {
            pub const ALL: [Variation; 21] = [$(Variation::$variant,)*];

            pub fn acronym(&self) -> &'static str {
                match self { $(Variation::$variant => $code,)* }
            }

            /// Expression, Action, Pose, Occlusion or Light.
            pub fn kind(&self) -> &'static str {
                match self { $(Variation::$variant => $kind,)* }
            }

            pub fn description(&self) -> &'static str {
                match self { $(Variation::$variant => $name,)* }
            }
        }

        impl FromStr for Variation {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $(if s.eq_ignore_ascii_case($code) { return Ok(Variation::$variant); })*
                Err(Error::Validation(format!("unknown variation `{s}`")))
            }
        }
    };
}

variations! {
    Nn => "NN", "Expression", "Neutral";
    Eh => "EH", "Expression", "Happy";
    Ea => "EA", "Expression", "Angry";
    Es => "ES", "Expression", "Sad";
    Esp => "ESp", "Expression", "Surprised";
    Aec => "AEC", "Action", "Eyes closed";
    Aom => "AOM", "Action", "Open mouth";
    Pu => "PU", "Pose", "Look up";
    Pd => "PD", "Pose", "Look down";
    Pl => "PL", "Pose", "Look left";
    Pr => "PR", "Pose", "Look right";
    Oog => "OOG", "Occlusion", "Optical glasses";
    Osg => "OSG", "Occlusion", "Sunglasses";
    Oh => "OH", "Occlusion", "Hat";
    Ohm => "OHM", "Occlusion", "Hand on mouth";
    Ohe => "OHE", "Occlusion", "Hand on eye";
    Llu => "LLU", "Light", "Light up";
    Llr => "LLR", "Light", "Light right";
    Lll => "LLL", "Light", "Light left";
    Ld => "LD", "Light", "Dark";
    Lr => "LR", "Light", "Room light";
}

impl fmt::Display for Variation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.acronym())
    }
}

/// A face photograph with its capture metadata. Pixels are floats in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pub raster: Raster,
    pub spectrum: Spectrum,
    pub subject_id: u32,
    pub variation: Variation,
    pub mirrored: bool,
}

impl FaceImage {
    pub fn new(raster: Raster, spectrum: Spectrum, subject_id: u32, variation: Variation) -> Self {
        Self {
            raster,
            spectrum,
            subject_id,
            variation,
            mirrored: false,
        }
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn with_raster(&self, raster: Raster) -> Self {
        Self {
            raster,
            ..self.clone()
        }
    }

    /// Single-channel copy; both spectra share one network input format.
    pub fn to_gray(&self) -> Self {
        self.with_raster(self.raster.to_gray())
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            raster: self.raster.flip_horizontal(),
            mirrored: !self.mirrored,
            ..self.clone()
        }
    }

    pub fn load(
        path: &Path,
        spectrum: Spectrum,
        subject_id: u32,
        variation: Variation,
    ) -> Result<Self> {
        let raster = Raster::load(path)?;
        if spectrum == Spectrum::Th && raster.channels != 1 {
            // Thermal captures are sometimes stored as false-color RGB.
            return Ok(Self::new(raster.to_gray(), spectrum, subject_id, variation));
        }
        Ok(Self::new(raster, spectrum, subject_id, variation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variation_codes_roundtrip() {
        assert_eq!(Variation::ALL.len(), 21);
        for v in Variation::ALL {
            assert_eq!(v.acronym().parse::<Variation>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.acronym()));
        }
        assert_eq!("esp".parse::<Variation>().unwrap(), Variation::Esp);
        assert!("XX".parse::<Variation>().is_err());
    }

    #[test]
    fn spectrum_parse() {
        assert_eq!("th".parse::<Spectrum>().unwrap(), Spectrum::Th);
        assert_eq!(serde_json::to_string(&Spectrum::Vis).unwrap(), "\"VIS\"");
    }
}
