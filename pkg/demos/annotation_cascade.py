# Walk one record through the tool cascade with scripted backends.
from affordkit.annotate import (
    AnnotationTask,
    BackendSet,
    HumanQueue,
    ToolFailed,
    load_annotation_config,
    plan_tools,
    run_cascade,
)
from affordkit.maskops import BBox, rasterize_box, rle_encode

config = load_annotation_config()
comp = config.composition("EgoObjects")

task = AnnotationTask("ego-17", "ego/017.jpg", "knife", (48, 64), gt_box=BBox(10, 12, 40, 30))
plan = plan_tools(task, comp, config.part_vocabulary)
print("plan:", [t.value for t in plan])


def no_handle(_task):
    raise ToolFailed("part grounding found nothing")


# no segmenter service: the box is rasterized as the mask
backends = BackendSet(runners={plan[0]: no_handle})
res = run_cascade(task, plan, backends, HumanQueue())
for step in res.trace:
    print(f"  {step.tool.value:<30} {step.status:<8} {step.note}")
print("provenance:", res.provenance)
print("area:", res.final.area(), "==", rle_encode(rasterize_box(task.gt_box, 64, 48)).area())

# everything fails: the task waits for a person
queue = HumanQueue()
res = run_cascade(task, plan, BackendSet(runners={t: no_handle for t in plan[:-1]}), queue)
print("pending human:", res.pending_human, queue.items)
