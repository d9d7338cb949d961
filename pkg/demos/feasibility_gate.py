"""Why retrieval weighs slot overlap alongside text similarity.

Two stored atoms compete for a query. One reads almost like the query but
needs a slot the agent does not hold. The other is phrased differently but
is executable right now. Pure cosine picks the first; the hybrid score
picks the second.

    python3 demos/feasibility_gate.py
"""
from __future__ import annotations

from sga.extraction import Provenance, SgaAtom
from sga.store import ExperienceStore, HashingEmbedder, RetrievalQuery, embed_atoms

QUERY = "task: find the city of the author | known: <AUTHOR_ID> || Obtain <CITY_ID> from <AUTHOR_ID>"


def main() -> None:
    emb = HashingEmbedder()
    lookalike = SgaAtom(
        "lookalike", QUERY.replace("<AUTHOR_ID>", "<PERSON_ID>"), frozenset({"<PERSON_ID>"}),
        "Obtain <CITY_ID> from <PERSON_ID>",
        {"tool_name": "get_city", "argument_template": {"person_id": "<PERSON_ID>"}}, Provenance("demo", 1, 0.9))
    usable = SgaAtom(
        "usable", "look up where an author lives", frozenset({"<AUTHOR_ID>"}), "author home city",
        {"tool_name": "get_city", "argument_template": {"author_id": "<AUTHOR_ID>"}}, Provenance("demo", 1, 0.9))
    store = ExperienceStore(embed_atoms([lookalike, usable], emb))
    query = RetrievalQuery.build(QUERY, emb, {"<AUTHOR_ID>"})

    print(f"agent holds: {sorted(query.available_slots)}\n")
    for beta in (0.0, 0.1, 0.3, 0.5):
        ranked = store.retrieve(query, k=2, beta=beta)
        line = "  ".join(f"{a.sga_id}={s:.3f}" for a, s in ranked)
        print(f"beta={beta:.1f}  top={ranked[0][0].sga_id:<9}  {line}")


if __name__ == "__main__":
    main()
