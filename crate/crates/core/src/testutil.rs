//! Hand-built observations and packets for unit tests.

use crate::langpack::LangPackPacket;
use crate::world_sim::{
    EgoPoint, LightState, MotionTag, NearbyObject, ObjectClass, Observation, Vec2, VehicleState,
};
use crate::AgentId;

pub fn observation(speed: f64) -> Observation {
    Observation {
        agent_id: AgentId::new("0"),
        ego: VehicleState::at(Vec2::new(0.0, 0.0), std::f64::consts::FRAC_PI_2, speed),
        nearby_objects: Vec::new(),
        goal_offset: EgoPoint::new(0.0, 20.0),
        goal_is_endpoint: false,
        speed_limit: 10.0,
        image: None,
        sim_time: 0.0,
    }
}

pub fn object(id: &str, class: ObjectClass, right: f64, front: f64) -> NearbyObject {
    let relative = EgoPoint::new(right, front);
    NearbyObject {
        id: id.into(),
        class,
        relative,
        range: relative.distance(),
        relative_speed: 0.0,
        motion: MotionTag::Stationary,
        light: None,
        length: match class {
            ObjectClass::Vehicle => 4.5,
            ObjectClass::TrafficLight => 0.0,
            _ => 0.6,
        },
    }
}

pub fn light(id: &str, state: LightState, front: f64) -> NearbyObject {
    NearbyObject {
        light: Some(state),
        ..object(id, ObjectClass::TrafficLight, 0.0, front)
    }
}

pub fn packet(id: &str, location: Vec2, speed: f64, timestamp: f64, intent: &str) -> LangPackPacket {
    LangPackPacket {
        agent_id: id.into(),
        timestamp,
        location,
        speed,
        acceleration: 0.0,
        scene_desc: "Urban road.".into(),
        objects_desc: "None.".into(),
        goal_desc: "Straight ahead.".into(),
        intent_desc: intent.into(),
    }
}
