//! Completion codes: a keyed hash of (room, user), so a code can be checked
//! later without storing it.

use colloquy_core::model::{RoomId, UserId};
use hmac::{Hmac, Mac};
use sha2::Sha256;

pub const CODE_LEN: usize = 10;
const ALPHABET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz23456789";

pub fn code(secret: &[u8], room: &RoomId, user: UserId) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("hmac takes any key length");
    mac.update(room.0.as_bytes());
    mac.update(&[0]);
    mac.update(&user.0.to_be_bytes());
    let digest = mac.finalize().into_bytes();
    digest.iter().take(CODE_LEN).map(|b| ALPHABET[*b as usize % ALPHABET.len()] as char).collect()
}

pub fn verify(secret: &[u8], room: &RoomId, user: UserId, candidate: &str) -> bool {
    code(secret, room, user) == candidate
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape() {
        let c = code(b"k", &"room-1".into(), UserId(3));
        assert_eq!(c.len(), CODE_LEN);
        assert!(c.chars().all(|ch| ch.is_ascii_alphanumeric()));
        assert!(verify(b"k", &"room-1".into(), UserId(3), &c));
        assert!(!verify(b"other", &"room-1".into(), UserId(3), &c));
    }

    proptest! {
        #[test]
        fn distinct_inputs_give_distinct_codes(a in 0u64..1000, b in 0u64..1000, room in "[a-z]{1,8}") {
            prop_assume!(a != b);
            let r: RoomId = room.into();
            prop_assert_ne!(code(b"s", &r, UserId(a)), code(b"s", &r, UserId(b)));
        }
    }
}
