/// Channel planes of packed 32-bit ARGB pixels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArgbPlanes {
    pub a: Vec<u8>,
    pub r: Vec<u8>,
    pub g: Vec<u8>,
    pub b: Vec<u8>,
}

/// Splits Android color integers (`0xAARRGGBB`) into channel planes.
pub fn decode_argb(packed: &[u32]) -> ArgbPlanes {
    let mut out = ArgbPlanes {
        a: Vec::with_capacity(packed.len()),
        r: Vec::with_capacity(packed.len()),
        g: Vec::with_capacity(packed.len()),
        b: Vec::with_capacity(packed.len()),
    };
    for &px in packed {
        out.a.push((px >> 24) as u8);
        out.r.push((px >> 16) as u8);
        out.g.push((px >> 8) as u8);
        out.b.push(px as u8);
    }
    out
}

/// Inverse of [`decode_argb`].
pub fn pack_argb(planes: &ArgbPlanes) -> Vec<u32> {
    planes
        .a
        .iter()
        .zip(&planes.r)
        .zip(&planes.g)
        .zip(&planes.b)
        .map(|(((&a, &r), &g), &b)| {
            (a as u32) << 24 | (r as u32) << 16 | (g as u32) << 8 | b as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(px: u32) -> (u8, u8, u8, u8) {
        let p = decode_argb(&[px]);
        (p.a[0], p.r[0], p.g[0], p.b[0])
    }

    #[test]
    fn bit_layout() {
        assert_eq!(one(0xFFFF0000), (255, 255, 0, 0));
        assert_eq!(one(0x00000000), (0, 0, 0, 0));
        assert_eq!(one(0x80102030), (128, 16, 32, 48));
    }

    proptest! {
        #[test]
        fn pack_inverts_decode(words in prop::collection::vec(any::<u32>(), 0..64)) {
            prop_assert_eq!(pack_argb(&decode_argb(&words)), words);
        }
    }
}
