"""Free-energy estimation for bipartite spin models with AIS and marginalized AIS."""
