#include "ccl/dcr.hpp"

namespace ccl::dcr {

std::string_view task_name(TaskKind task) {
  switch (task) {
    case TaskKind::TextToVideo:
      return "t2v";
    case TaskKind::TextToAudio:
      return "t2a";
    case TaskKind::AudioToVideo:
      return "a2v";
    case TaskKind::VideoToAudio:
      return "v2a";
    case TaskKind::JointAV:
      return "joint";
  }
  return "?";
}

std::optional<TaskKind> parse_task(std::string_view name) {
  for (TaskKind t : kAllTasks) {
    if (task_name(t) == name) return t;
  }
  return std::nullopt;
}

RoutingPlan routing_plan(TaskKind task) {
  RoutingPlan p;
  p.task = task;
  const StreamRoute lct_only{.active = true, .use_cross_latent = false, .use_lct = true, .is_reference = false,
                             .loss_weight = 1.0F};
  const StreamRoute full{.active = true, .use_cross_latent = true, .use_lct = true, .is_reference = false,
                         .loss_weight = 1.0F};
  const StreamRoute reference{.active = true, .use_cross_latent = false, .use_lct = true, .is_reference = true,
                              .loss_weight = 0.0F};
  StreamRoute off = lct_only;
  off.active = false;
  off.loss_weight = 0.0F;
  switch (task) {
    case TaskKind::TextToVideo:
      p.video = lct_only;
      p.audio = off;
      break;
    case TaskKind::TextToAudio:
      p.audio = lct_only;
      p.video = off;
      break;
    case TaskKind::AudioToVideo:
      p.audio = reference;
      p.video = full;
      break;
    case TaskKind::VideoToAudio:
      p.video = reference;
      p.audio = full;
      break;
    case TaskKind::JointAV:
      p.audio = full;
      p.video = full;
      p.shared_timestep = true;
      break;
  }
  return p;
}

GateValues gated_baseline_plan(TaskKind task) {
  switch (task) {
    case TaskKind::TextToVideo:
    case TaskKind::TextToAudio:
      return {0, 0};
    case TaskKind::AudioToVideo:
      return {.audio = 0, .video = 1};
    case TaskKind::VideoToAudio:
      return {.audio = 1, .video = 0};
    case TaskKind::JointAV:
      return {1, 1};
  }
  return {0, 0};
}

RoutingPlan gated_routing(TaskKind task) {
  RoutingPlan p = routing_plan(task);
  const GateValues g = gated_baseline_plan(task);
  p.audio.use_lct = false;
  p.video.use_lct = false;
  p.audio.use_cross_latent = g.audio == 1;
  p.video.use_cross_latent = g.video == 1;
  return p;
}

}  // namespace ccl::dcr
