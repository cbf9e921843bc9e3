#pragma once

// Per-task routing of the cross-modal attention key/value sources.

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace ccl::dcr {

enum class TaskKind { TextToVideo, TextToAudio, AudioToVideo, VideoToAudio, JointAV };

inline constexpr std::array<TaskKind, 5> kAllTasks = {TaskKind::TextToVideo, TaskKind::TextToAudio,
                                                      TaskKind::AudioToVideo, TaskKind::VideoToAudio,
                                                      TaskKind::JointAV};

std::string_view task_name(TaskKind task);
std::optional<TaskKind> parse_task(std::string_view name);

// Behaviour of one stream under a task. The cross-modal attention of this
// stream reads the opposing stream's latents when `use_cross_latent` is set
// and this stream's context-token bank when `use_lct` is set.
struct StreamRoute {
  bool active = true;  // inactive streams are not executed at all
  bool use_cross_latent = false;
  bool use_lct = true;
  bool is_reference = false;  // clean input (timestep 0), detached, no loss
  float loss_weight = 1.0F;

  bool operator==(const StreamRoute&) const = default;
};

struct RoutingPlan {
  TaskKind task = TaskKind::JointAV;
  StreamRoute audio;
  StreamRoute video;
  bool shared_timestep = false;

  bool operator==(const RoutingPlan&) const = default;
};

// Context-routing plan used by the CCL variant.
RoutingPlan routing_plan(TaskKind task);

struct GateValues {
  int audio = 0;
  int video = 0;
};

// Binary gate of the baseline block: 1 where the task needs cross-modal input.
GateValues gated_baseline_plan(TaskKind task);

// Routing plan equivalent to the gated baseline: no context tokens, cross
// latents wherever the gate is open. Reference/loss semantics match the CCL
// plan for the same task.
RoutingPlan gated_routing(TaskKind task);

}  // namespace ccl::dcr
