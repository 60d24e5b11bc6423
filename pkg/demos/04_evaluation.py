# Win/lose/tie bookkeeping, Rouge, and folding two judge orders.
import math

from meetalign.evaluation import Verdict, aggregate_two_orders, compare, rouge_avg, rouge_l, winrate

edge = math.log(0.55 / 0.45)        # sigma(edge) = 0.55
for gap in (0.0, edge, edge + 1e-9, -1.0):
    print(f"r1 - r2 = {gap:+.12f} -> {compare(gap, 0.0).value}")

print("rouge_l('a b c', 'a c') =", rouge_l("a b c", "a c"))
print("rouge_avg =", round(rouge_avg("the cat sat", "the cat sat down"), 4))

reward = lambda prompt, response: 1.0 if response == "".join(sorted(prompt)) else 0.0
ours = [("cab", "abc"), ("ba", "ab"), ("zyx", "zxy")]
theirs = [("cab", "acb"), ("ba", "ab"), ("zyx", "xyz")]
print(winrate(ours, theirs, reward, candidate="ours", baseline="theirs"))

for ab in Verdict:
    print(ab.value, "then", [aggregate_two_orders(ab, ba).value for ba in Verdict])
