use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::Image;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const MAX_JITTER: i32 = 2;
/// Half-extent of every shape in pixels.
const RADIUS: i32 = 5;

macro_rules! attribute {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Word(s) used for this value in captions.
            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&x| x == self).expect("listed")
            }

            pub fn random(rng: &mut impl Rng) -> Self {
                Self::ALL[rng.random_range(0..Self::ALL.len())]
            }
        }
    };
}

attribute!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
attribute!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
});
attribute!(Quadrant {
    UpperLeft => "upper left",
    UpperRight => "upper right",
    LowerLeft => "lower left",
    LowerRight => "lower right",
});
attribute!(Background { Black => "black", Gray => "gray", White => "white" });

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.9, 0.9, 0.1],
            Color::Purple => [0.6, 0.1, 0.8],
            Color::Orange => [1.0, 0.55, 0.0],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::Black => [0.0; 3],
            Background::Gray => [0.5; 3],
            Background::White => [0.95; 3],
        }
    }
}

impl Quadrant {
    /// Pixel `(x, y)` of the quadrant centre.
    pub fn center(self) -> (i32, i32) {
        let (lo, hi) = (IMAGE_SIZE as i32 / 4, 3 * IMAGE_SIZE as i32 / 4);
        match self {
            Quadrant::UpperLeft => (lo, lo),
            Quadrant::UpperRight => (hi, lo),
            Quadrant::LowerLeft => (lo, hi),
            Quadrant::LowerRight => (hi, hi),
        }
    }
}

/// Attributes of one rendered image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub shape: Shape,
    pub color: Color,
    pub quadrant: Quadrant,
    pub background: Background,
}

pub const NUM_CLASSES: usize = 4 * 6 * 4 * 3;

impl Labels {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            shape: Shape::random(rng),
            color: Color::random(rng),
            quadrant: Quadrant::random(rng),
            background: Background::random(rng),
        }
    }

    /// Index in `0..NUM_CLASSES`.
    pub fn class(&self) -> usize {
        ((self.shape.index() * 6 + self.color.index()) * 4 + self.quadrant.index()) * 3 + self.background.index()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub labels: Labels,
    /// Offset of the shape centre from the quadrant centre.
    pub jitter: (i32, i32),
}

impl SceneSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        let labels = Labels::random(rng);
        let jx = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        let jy = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        Self {
            labels,
            jitter: (jx, jy),
        }
    }
}

/// Whether offset `(dx, dy)` from the centre is inside `shape`.
fn covers(shape: Shape, dx: i32, dy: i32) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= RADIUS * RADIUS,
        Shape::Square => dx.abs() < RADIUS && dy.abs() < RADIUS,
        // Apex on top, base of width 2·RADIUS+1 at the bottom.
        Shape::Triangle => dx.abs() <= (dy + RADIUS) / 2,
        Shape::Cross => (dx.abs() <= 1 && dy.abs() <= RADIUS) || (dy.abs() <= 1 && dx.abs() <= RADIUS),
    }
}

/// Rasterizes the scene without anti-aliasing.
pub fn render(spec: &SceneSpec) -> Image {
    let mut img = Image::zeros(IMAGE_SIZE, IMAGE_SIZE, CHANNELS);
    let bg = spec.labels.background.rgb();
    let fg = spec.labels.color.rgb();
    let (qx, qy) = spec.labels.quadrant.center();
    let (cx, cy) = (qx + spec.jitter.0, qy + spec.jitter.1);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (dx, dy) = (x as i32 - cx, y as i32 - cy);
            let inside = dx.abs() <= RADIUS && dy.abs() <= RADIUS && covers(spec.labels.shape, dx, dy);
            img.pixel_mut(y, x).copy_from_slice(if inside { &fg } else { &bg });
        }
    }
    img
}

/// Recovers the labels of a rendered image from its pixels.
pub fn decode_labels(img: &Image) -> Option<Labels> {
    let background = *Background::ALL.iter().find(|b| img.pixel(0, 0) == b.rgb() || img.pixel(IMAGE_SIZE - 1, IMAGE_SIZE - 1) == b.rgb())?;
    let bg = background.rgb();
    let mut fg = None;
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    let mut count = 0;
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(y, x);
            if p == bg {
                continue;
            }
            fg.get_or_insert(p);
            count += 1;
            (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
        }
    }
    let fg = fg?;
    let color = *Color::ALL.iter().find(|c| c.rgb() == fg)?;
    let half = IMAGE_SIZE / 2;
    let quadrant = match ((x0 + x1) / 2 >= half, (y0 + y1) / 2 >= half) {
        (false, false) => Quadrant::UpperLeft,
        (true, false) => Quadrant::UpperRight,
        (false, true) => Quadrant::LowerLeft,
        (true, true) => Quadrant::LowerRight,
    };
    let row_width = |y: usize| (x0..=x1).filter(|&x| img.pixel(y, x) != bg).count();
    let fill = count as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let shape = if fill > 0.95 {
        Shape::Square
    } else if row_width(y1) > row_width(y0) + 4 {
        Shape::Triangle
    } else if fill > 0.56 {
        Shape::Circle
    } else {
        Shape::Cross
    };
    Some(Labels {
        shape,
        color,
        quadrant,
        background,
    })
}

/// Caption templates; every sentence names all four attributes.
const TEMPLATES: &[&str] = &[
    "a {c} {s} in the {q} corner on a {b} background .",
    "there is a {c} {s} at the {q} of the image over {b} .",
    "the {s} is {c} and sits {q} against a {b} backdrop .",
    "one {c} {s} appears toward the {q} side with {b} behind it .",
    "we see a single {c} {s} placed {q} on {b} .",
    "this picture shows a {c} {s} near the {q} edge of a {b} field .",
    "in the {q} quarter a small {c} {s} rests on plain {b} .",
    "the image contains a {c} {s} located {q} over a {b} canvas .",
    "a {b} scene with a {c} {s} drawn in its {q} region .",
    "look at the {c} {s} positioned {q} upon the {b} surface .",
    "somewhere {q} you can find a {c} {s} on {b} ground .",
    "the {b} frame holds a bright {c} {s} toward its {q} area .",
    "an isolated {c} {s} occupies the {q} zone of this {b} photo .",
    "notice how the {q} part has a {c} {s} over solid {b} .",
    "our {c} {s} stays {q} while everything else is {b} .",
    "only the {q} section shows a {c} {s} above flat {b} paint .",
    "drawn {q} , a {c} {s} stands out from the {b} color .",
    "the {c} {s} was painted {q} onto a {b} sheet .",
    "it depicts a {c} {s} lying {q} across a {b} backdrop .",
    "against {b} we observe a {c} {s} sitting {q} .",
    "centered {q} there is exactly one {c} {s} on {b} tone .",
    "a simple {c} {s} marks the {q} quadrant of a {b} tile .",
];

/// Question appended to captions for answer classification.
pub const QUESTION: &str = "what shape ?";

pub fn num_templates() -> usize {
    TEMPLATES.len()
}

/// One sentence describing `labels` with template `t`.
pub fn sentence(labels: &Labels, t: usize) -> String {
    TEMPLATES[t % TEMPLATES.len()]
        .replace("{c}", labels.color.word())
        .replace("{s}", labels.shape.word())
        .replace("{q}", labels.quadrant.word())
        .replace("{b}", labels.background.word())
}

/// Every template instantiated with every attribute word, for vocabulary
/// building and length checks.
pub fn all_sentences() -> impl Iterator<Item = String> {
    let mut labels = Vec::new();
    for &shape in Shape::ALL {
        for &color in Color::ALL {
            for &quadrant in Quadrant::ALL {
                for &background in Background::ALL {
                    labels.push(Labels {
                        shape,
                        color,
                        quadrant,
                        background,
                    });
                }
            }
        }
    }
    labels
        .into_iter()
        .flat_map(|l| (0..TEMPLATES.len()).map(move |t| sentence(&l, t)))
}

/// A caption of 1 to 3 sentences about `labels`.
pub fn caption(labels: &Labels, rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| sentence(labels, rng.random_range(0..TEMPLATES.len())))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One generated example.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPair {
    pub image: Image,
    pub text: String,
    /// Attributes of the image.
    pub labels: Labels,
    /// Attributes the caption describes.
    pub text_labels: Labels,
    pub spec: SceneSpec,
}

/// Renders a random scene. With probability `rho` the caption describes
/// it; otherwise the caption describes an independently drawn scene.
pub fn generate_pair(rng: &mut impl Rng, rho: f64) -> GeneratedPair {
    let spec = SceneSpec::random(rng);
    let image = render(&spec);
    let truthful = rng.random_bool(rho.clamp(0.0, 1.0));
    let text_labels = if truthful { spec.labels } else { Labels::random(rng) };
    let text = caption(&text_labels, rng);
    GeneratedPair {
        image,
        text,
        labels: spec.labels,
        text_labels,
        spec,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn truthful_captions_name_the_image_attributes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = generate_pair(&mut rng, 1.0);
            assert_eq!(p.text_labels, p.labels);
            for s in p.text.split(" . ").map(str::trim) {
                assert!(s.contains(p.labels.shape.word()) && s.contains(p.labels.color.word()));
                assert!(s.contains(p.labels.quadrant.word()) && s.contains(p.labels.background.word()));
            }
        }
    }

    #[test]
    fn generation_replays_bitwise() {
        let a = generate_pair(&mut ChaCha8Rng::seed_from_u64(42), 1.0);
        let b = generate_pair(&mut ChaCha8Rng::seed_from_u64(42), 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn independent_captions_agree_by_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agree = (0..10_000)
            .filter(|_| {
                let p = generate_pair(&mut rng, 0.0);
                p.text_labels.shape == p.labels.shape
            })
            .count();
        assert!((agree as f64 / 10_000.0 - 0.25).abs() <= 0.02);
    }

    #[test]
    fn decoder_recovers_every_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = generate_pair(&mut rng, 0.5);
            assert_eq!(decode_labels(&p.image), Some(p.labels));
        }
    }

    #[test]
    fn class_indices_are_a_bijection() {
        let mut seen = vec![false; NUM_CLASSES];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20_000 {
            seen[Labels::random(&mut rng).class()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn shapes_stay_inside_their_quadrant() {
        for &q in Quadrant::ALL {
            for jx in -MAX_JITTER..=MAX_JITTER {
                for jy in -MAX_JITTER..=MAX_JITTER {
                    let labels = Labels {
                        shape: Shape::Square,
                        color: Color::Red,
                        quadrant: q,
                        background: Background::Black,
                    };
                    let img = render(&SceneSpec { labels, jitter: (jx, jy) });
                    assert_eq!(decode_labels(&img).unwrap().quadrant, q);
                }
            }
        }
    }
}
