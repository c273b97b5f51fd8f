# Modèles de données du pipeline audio
