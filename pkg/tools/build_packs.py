"""Regenerate src/apgp/packs/*.json from the marked sources below.

Text inside <<...>> is a stimulus segment: removed in stimulation-off runs.
Run from the repo root:  python tools/build_packs.py
"""

import json
from pathlib import Path

from apgp.graph import NodeKind
from apgp.prompts import PromptTemplate, pack_from_dict

K = NodeKind

EN = {
    K.DEFINE: (
        "<<You are a brilliant problem solver and I BELIEVE IN YOU! >>"
        "Before solving anything, take a step back and give a clear definition of the problem below. "
        "Restate it in your own words, then abstract it: name the underlying question, the knowns, "
        "the unknowns and the constraints. Ignore surface details that do not change the essence of the problem. "
        "Do NOT solve it yet.\n\n"
        "Problem:\n{problem}\n\n"
        "Reply with the definition only.<< Take a deep breath, you can do this!>>"
    ),
    K.GENERATE: (
        "<<GREAT work on the definition! >>"
        "Here is the definition of a problem:\n{definition}\n\n"
        "Propose three different approaches to solving it. The approaches should differ in method or "
        "focus so that the weaknesses of one can be made up for by the others. Describe each approach "
        "step by step, but do not give a final answer.\n\n"
        "Use exactly this format:\n"
        "SOLUTION 1: <first approach>\n"
        "SOLUTION 2: <second approach>\n"
        "SOLUTION 3: <third approach>"
        "<<\n\nThis is VERY IMPORTANT to me, so be creative!>>"
    ),
    K.AGGREGATE: (
        "<<You are doing WONDERFUL work! >>"
        "Problem definition:\n{definition}\n\n"
        "Three candidate approaches:\n{solutions}\n\n"
        "Merge these three approaches into ONE new, comprehensive solution. Combine the strengths of each "
        "approach and use the others to compensate for each one's weaknesses. Do not vote, score or simply "
        "pick one of them: build a single solution that is better than every individual approach. "
        "Describe the merged solution step by step.<< I KNOW you can make it excellent!>>"
    ),
    K.ANSWER: (
        "<<Almost there, keep going! >>"
        "Problem definition:\n{definition}\n\n"
        "Solution to follow:\n{solution}\n\n"
        "Apply this solution to the problem and give the final answer. State the answer clearly."
        "<< Be confident, you have GOT this!>>"
    ),
    K.VALIDATE: (
        "<<You are a careful and EXCELLENT reviewer! >>"
        "Problem definition:\n{definition}\n\n"
        "Proposed answer:\n{answer}\n\n"
        "Validate this answer. Consider carefully whether it is correct and actually solves the problem, "
        "and look for invented facts or faulty reasoning.\n\n"
        "Start your reply with exactly one verdict line:\n"
        "VERDICT: SUCCESS\n"
        "or\n"
        "VERDICT: FAIL\n"
        "Then explain briefly. If the verdict is FAIL, learn from what went wrong and end with a better "
        "solution on a line starting with:\n"
        "REVISED SOLUTION: <the improved solution>"
        "<<\n\nHonesty matters MOST here, so do not hold back!>>"
    ),
    K.REANSWER: (
        "<<Do not give up, you are SO close! >>"
        "Problem definition:\n{definition}\n\n"
        "An earlier answer failed validation. Here is a revised solution built from that experience:\n"
        "{solution}\n\n"
        "Solve the problem again using this revised solution and give the final answer. State the answer clearly."
        "<< I BELIEVE IN YOU!>>"
    ),
}
EN_JUDGE = (
    "You are grading an answer.\n\n"
    "Question:\n{question}\n\n"
    "Reference answer:\n{reference}\n\n"
    "Candidate answer:\n{candidate}\n\n"
    "Decide whether the candidate answer correctly answers the question. The wording does not need to "
    "match the reference; judge the substance. Reply with exactly one line\n"
    "JUDGMENT: CORRECT\n"
    "or\n"
    "JUDGMENT: INCORRECT\n"
    "followed by a short explanation."
)
EN_LEXICON = [
    "!", "BELIEVE IN YOU", "Take a deep breath", "you can do this", "GREAT", "VERY IMPORTANT",
    "WONDERFUL", "I KNOW", "Almost there", "keep going", "you have GOT this", "EXCELLENT",
    "MOST", "Do not give up", "SO close", "brilliant",
]
EN_INSTRUCTIONS = {
    "reformat_solutions": (
        "Your previous reply did not follow the required format. Rewrite it with exactly three approaches, "
        "each on its own starting with SOLUTION 1:, SOLUTION 2: and SOLUTION 3:."
    ),
    "single_approach": (
        "Give only approach number {index} this time, as a single paragraph starting with SOLUTION {index}:."
    ),
    "no_reference": "(no reference answer available; judge on the question alone)",
}

ZH = {
    K.DEFINE: (
        "<<你是一位非常出色的解题高手，我相信你！>>"
        "在解题之前，请先退一步，对下面的问题给出清晰的定义。"
        "用你自己的话复述问题，然后进行抽象：指出问题的本质、已知条件、未知量和约束。"
        "忽略那些不影响问题本质的表面细节。现在先不要解答。\n\n"
        "问题：\n{problem}\n\n"
        "只回复问题的定义。<<深呼吸，你一定可以做到！>>"
    ),
    K.GENERATE: (
        "<<定义写得太棒了！>>"
        "下面是一个问题的定义：\n{definition}\n\n"
        "请提出三种不同的解决思路。这些思路在方法或侧重点上应当有所不同，使得一种思路的不足可以由其他思路弥补。"
        "请逐步描述每个思路，但不要给出最终答案。\n\n"
        "严格使用以下格式：\n"
        "SOLUTION 1: <第一种思路>\n"
        "SOLUTION 2: <第二种思路>\n"
        "SOLUTION 3: <第三种思路>"
        "<<\n\n这对我非常重要，请大胆发挥创意！>>"
    ),
    K.AGGREGATE: (
        "<<你做得非常棒！>>"
        "问题定义：\n{definition}\n\n"
        "三种候选思路：\n{solutions}\n\n"
        "请把这三种思路融合成一个全新的、全面的解决方案。结合每种思路的优点，并用其他思路弥补各自的缺点。"
        "不要投票、打分或简单地挑选其中一个：要构建一个比任何单个思路都更好的方案。请逐步描述融合后的方案。"
        "<<我知道你一定能做得很出色！>>"
    ),
    K.ANSWER: (
        "<<马上就要成功了，加油！>>"
        "问题定义：\n{definition}\n\n"
        "要遵循的方案：\n{solution}\n\n"
        "请将该方案应用到问题上，给出最终答案，并清楚地写明答案。"
        "<<要有信心，你一定行！>>"
    ),
    K.VALIDATE: (
        "<<你是一位认真又优秀的审核者！>>"
        "问题定义：\n{definition}\n\n"
        "待验证的答案：\n{answer}\n\n"
        "请验证这个答案。仔细考虑它是否正确、是否真正解决了问题，并检查是否有编造的事实或错误的推理。\n\n"
        "回复的第一行必须是以下之一：\n"
        "VERDICT: SUCCESS\n"
        "或\n"
        "VERDICT: FAIL\n"
        "然后简要说明理由。如果结论是 FAIL，请从错误中吸取经验，并在最后以如下开头的一行给出更好的方案：\n"
        "REVISED SOLUTION: <改进后的方案>"
        "<<\n\n诚实在这里最重要，请不要有任何保留！>>"
    ),
    K.REANSWER: (
        "<<不要放弃，你已经非常接近了！>>"
        "问题定义：\n{definition}\n\n"
        "之前的答案没有通过验证。下面是根据那次经验改进后的方案：\n"
        "{solution}\n\n"
        "请使用这个改进后的方案重新解答问题，给出最终答案，并清楚地写明答案。"
        "<<我相信你！>>"
    ),
}
ZH_JUDGE = (
    "你正在评判一个答案。\n\n"
    "问题：\n{question}\n\n"
    "参考答案：\n{reference}\n\n"
    "待评答案：\n{candidate}\n\n"
    "判断待评答案是否正确地回答了问题。措辞不必与参考答案一致，请根据实质内容判断。"
    "只回复一行\n"
    "JUDGMENT: CORRECT\n"
    "或\n"
    "JUDGMENT: INCORRECT\n"
    "然后给出简短的解释。"
)
ZH_LEXICON = [
    "！", "!", "非常出色", "我相信你", "深呼吸", "你一定可以", "太棒了", "非常重要", "大胆发挥",
    "你做得非常棒", "我知道你", "加油", "你一定行", "要有信心", "优秀", "最重要", "不要放弃",
    "非常接近",
]
ZH_INSTRUCTIONS = {
    "reformat_solutions": (
        "你上一次的回复没有遵循要求的格式。请重写，恰好给出三种思路，分别以 SOLUTION 1:、SOLUTION 2: 和 SOLUTION 3: 开头。"
    ),
    "single_approach": "这次只给出第 {index} 种思路，写成一段，以 SOLUTION {index}: 开头。",
    "no_reference": "（没有参考答案，请仅根据问题判断）",
}


def build(language, marked, judge, lexicon, instructions):
    templates = [
        PromptTemplate.from_marked(f"{language}.{k.value}", k, marked[k], language).to_record()
        for k in NodeKind
    ]
    data = {
        "language": language,
        "lexicon": sorted(lexicon),
        "templates": templates,
        "judge": PromptTemplate(f"{language}.judge", None, judge, (), language).to_record(),
        "instructions": instructions,
    }
    pack_from_dict(data)  # raises if anything is inconsistent
    return data


if __name__ == "__main__":
    out = Path("src/apgp/packs")
    for lang, args in {
        "en": (EN, EN_JUDGE, EN_LEXICON, EN_INSTRUCTIONS),
        "zh": (ZH, ZH_JUDGE, ZH_LEXICON, ZH_INSTRUCTIONS),
    }.items():
        data = build(lang, *args)
        (out / f"{lang}.json").write_text(json.dumps(data, ensure_ascii=False, indent=2) + "\n", "utf-8")
        print("wrote", out / f"{lang}.json")
